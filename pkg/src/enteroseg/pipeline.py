"""End-to-end orchestration: phantoms in, comparison tables out.

Every command reads one JSON config, works under a single output root, and
records what it produced in ``manifest.json`` together with the config hash,
so downstream commands can refuse to run against artifacts from a different
configuration. Slice files live as PNG trees (``slices/<patient>/NNNN.png``
mirrored by ``masks/``), fold plans / weights / reports as JSON, model state
in the binary checkpoint container, train histories as JSONL.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .dataset import (AugmentationSpec, ClassWeights, FoldPlan,
                      compute_class_weights, stratified_kfold)
from .medio import (CORONAL_AXIS, GrayscaleSlice, LabelMask, N_CLASSES,
                    ORGAN_NAMES, decode_mask_png, decode_slice_png,
                    encode_mask_png, encode_slice_png, normalize_slice,
                    parse_nifti, resize, volume_to_slices)
from .metrics import (BinaryMaskView, ClassResult, MetricsReport, aggregate, dsc,
                      hd95, iou, render_comparison, render_report)
from .nets import (BinaryNetConfig, CoarseNetConfig, build_binary_net,
                   build_coarse_net)
from .phantom import PhantomSpec, write_phantom_dataset
from .roi import (BBox3D, LabelVolume, RoiPatchSet, class_bbox, extract_roi,
                  pad_bbox, stack_predictions)
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainLog, train

__all__ = ["DEFAULT_CONFIG", "PipelineError", "load_config", "config_hash",
           "cmd_phantom", "cmd_convert", "cmd_split", "cmd_train_coarse",
           "cmd_predict_coarse", "cmd_extract_roi", "cmd_train_organ",
           "cmd_evaluate", "cmd_report", "resolve_class"]


class PipelineError(RuntimeError):
    """Operator-facing failure with a machine-readable payload."""

    def __init__(self, message: str, **payload):
        super().__init__(message)
        self.payload = {"error": message, **payload}


DEFAULT_CONFIG = {
    "dataset_root": "data/phantoms",
    "out": "runs/desk",
    "seed": 1234,
    "n_classes": 4,
    "coronal_axis": CORONAL_AXIS,
    "input_size": [64, 64],
    "folds": {"k": 5},
    "phantom": {
        "dims": [64, 64, 12],
        "n_patients": 12,
        "organ_classes": 3,
        "rare_class": 3,
        "rare_fraction": 0.7,
        "noise": 0.04,
    },
    "class_weights": {
        "enabled": True,
        "boost_class": 3,
        "boost_factor": 7.0,
        "allow_absent": [3],
    },
    "augmentation": {
        "enabled": True,
        "rotation_deg": 20.0,
        "shear_deg": 2.0,
        "brightness": 0.2,
        "contrast": 0.2,
        "hflip": True,
        "prob": 0.5,
    },
    "coarse": {
        "levels": 2,
        "init_channels": 8,
        "growth": 4,
        "block_layers": 2,
        "train": {
            "lr": 2e-3,
            "batch_size": 8,
            "max_epochs": 10,
            "early_stop_patience": 20,
            "plateau_factor": 0.5,
            "plateau_patience": 5,
        },
    },
    "binary": {
        "levels": 2,
        "init_channels": 8,
        "growth": 4,
        "block_layers": 2,
        "q_order": 3,
        "train": {
            "lr": 2e-3,
            "batch_size": 8,
            "max_epochs": 10,
            "early_stop_patience": 20,
            "plateau_factor": 0.5,
            "plateau_patience": 15,
        },
    },
    "roi": {"pad": 40, "target": [96, 96]},
}


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULT_CONFIG)
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise PipelineError(f"config file not found: {path}", path=str(path))
        except json.JSONDecodeError as e:
            raise PipelineError(f"config is not valid JSON: {e}", path=str(path))
        cfg = _deep_merge(cfg, raw)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def resolve_class(token, n_classes: int) -> int:
    """Accept an integer id or an organ name; validate the range."""
    if isinstance(token, str) and not token.lstrip("-").isdigit():
        if token not in ORGAN_NAMES:
            raise PipelineError(f"unknown class name {token!r}",
                                known=list(ORGAN_NAMES))
        cid = ORGAN_NAMES.index(token)
    else:
        cid = int(token)
    if not 1 <= cid < n_classes:
        raise PipelineError(f"class {cid} outside 1..{n_classes - 1}")
    return cid


# -- manifest ----------------------------------------------------------------

def _manifest_path(out: Path) -> Path:
    return out / "manifest.json"


def load_manifest(out: Path) -> dict:
    p = _manifest_path(out)
    if p.exists():
        return json.loads(p.read_text())
    return {"entries": {}}


def _record(out: Path, cfg: dict, key: str, relpath: str) -> None:
    man = load_manifest(out)
    man["entries"][key] = {"path": relpath, "config_hash": config_hash(cfg)}
    out.mkdir(parents=True, exist_ok=True)
    _manifest_path(out).write_text(json.dumps(man, indent=2, sort_keys=True))


def _require(out: Path, cfg: dict, key: str, command: str) -> Path:
    man = load_manifest(out)
    entry = man["entries"].get(key)
    if entry is None:
        raise PipelineError(
            f"{command} needs the {key!r} artifact; run the producing command "
            f"first", missing=key, command=command)
    if entry["config_hash"] != config_hash(cfg):
        raise PipelineError(
            f"{command}: artifact {key!r} was produced under a different "
            f"config", missing=key, command=command,
            artifact_hash=entry["config_hash"], config_hash=config_hash(cfg))
    path = out / entry["path"]
    if not path.exists():
        raise PipelineError(f"{command}: artifact {key!r} is recorded but "
                            f"missing on disk at {path}", missing=key,
                            command=command)
    return path


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# -- dataset access ------------------------------------------------------------

def _dataset_patients(root: Path) -> list[str]:
    pids = sorted(p.name.split("_image")[0] for p in root.glob("*_image.nii*"))
    if not pids:
        raise PipelineError(f"no patient volumes under {root}", root=str(root))
    return pids


def _patient_paths(root: Path, pid: str) -> tuple[Path, Path]:
    for ext in (".nii.gz", ".nii"):
        img = root / f"{pid}_image{ext}"
        if img.exists():
            mask = root / f"{pid}_mask{ext}"
            if not mask.exists():
                raise PipelineError(f"patient {pid} has an image but no mask",
                                    patient=pid)
            return img, mask
    raise PipelineError(f"patient {pid} not found under {root}", patient=pid)


def _label_volume(path: Path, n_classes: int) -> tuple[LabelVolume, tuple]:
    vol = parse_nifti(path.read_bytes())
    vox = vol.voxels
    rounded = np.rint(vox)
    if not np.allclose(vox, rounded, atol=1e-3):
        raise PipelineError(f"mask volume {path.name} has non-integer labels")
    labels = rounded.astype(np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise PipelineError(f"mask volume {path.name} has labels outside "
                            f"0..{n_classes - 1}", max_label=int(labels.max()))
    return LabelVolume(labels=labels.astype(np.uint8)), vol.pixdim


def _slice_files(d: Path) -> list[Path]:
    return sorted(d.glob("*.png"))


# -- commands ------------------------------------------------------------------

def cmd_phantom(cfg: dict, seed: int | None = None) -> dict:
    ph = cfg["phantom"]
    spec = PhantomSpec(
        dims=tuple(ph["dims"]),
        n_classes=int(ph["organ_classes"]),
        rare_class=ph.get("rare_class"),
        rare_fraction=float(ph.get("rare_fraction", 0.7)),
        noise=float(ph.get("noise", 0.04)),
        seed=int(seed if seed is not None else cfg["seed"]),
    )
    stats = write_phantom_dataset(spec, int(ph["n_patients"]), cfg["dataset_root"])
    return {"command": "phantom", "dataset_root": cfg["dataset_root"],
            "patients": stats["patients"], "voxel_counts": stats["voxel_counts"]}


def cmd_convert(cfg: dict) -> dict:
    root = Path(cfg["dataset_root"])
    out = Path(cfg["out"])
    axis = int(cfg["coronal_axis"])
    n_classes = int(cfg["n_classes"])
    index: dict = {}
    failures: dict = {}
    for pid in _dataset_patients(root):
        try:
            img_path, mask_path = _patient_paths(root, pid)
            vol = parse_nifti(img_path.read_bytes())
            labels, _ = _label_volume(mask_path, n_classes)
            slices = volume_to_slices(vol, axis=axis, patient=pid)
            sdir = out / "slices" / pid
            mdir = out / "masks" / pid
            sdir.mkdir(parents=True, exist_ok=True)
            mdir.mkdir(parents=True, exist_ok=True)
            for i, s in enumerate(slices):
                (sdir / f"{i:04d}.png").write_bytes(encode_slice_png(s))
                plane = np.take(labels.labels, i, axis=axis).T
                mask = LabelMask(labels=np.ascontiguousarray(plane))
                (mdir / f"{i:04d}.png").write_bytes(encode_mask_png(mask))
            index[pid] = {
                "n_slices": len(slices),
                "dims": list(vol.dims),
                "pixdim": list(vol.pixdim),
            }
        except Exception as e:  # keep going; report per patient
            failures[pid] = str(e)
    if not index:
        raise PipelineError("conversion produced no usable patients",
                            failures=failures)
    payload = {"patients": index, "failures": failures, "coronal_axis": axis}
    (out / "converted.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "converted.json").write_text(json.dumps(payload, indent=2,
                                                   sort_keys=True))
    _record(out, cfg, "converted", "converted.json")
    return {"command": "convert", "n_patients": len(index),
            "failures": failures}


def _converted(cfg: dict, command: str) -> dict:
    out = Path(cfg["out"])
    path = _require(out, cfg, "converted", command)
    return json.loads(path.read_text())


def cmd_split(cfg: dict, seed: int | None = None) -> dict:
    out = Path(cfg["out"])
    conv = _converted(cfg, "split")
    patients = sorted(conv["patients"])
    seed = int(seed if seed is not None else cfg["seed"])
    plan = stratified_kfold(patients, k=int(cfg["folds"]["k"]), seed=seed)
    (out / "folds.json").write_text(plan.to_json())
    _record(out, cfg, "folds", "folds.json")
    return {"command": "split", "k": plan.k, "seed": plan.seed,
            "sizes": [[len(f.train), len(f.val), len(f.test)]
                      for f in plan.folds]}


def _fold_plan(cfg: dict, command: str) -> FoldPlan:
    out = Path(cfg["out"])
    path = _require(out, cfg, "folds", command)
    return FoldPlan.from_json(path.read_text())


def _load_training_items(cfg: dict, patients, conv: dict):
    """(normalized image, label) pairs at stage-1 input size."""
    out = Path(cfg["out"])
    tw, th = cfg["input_size"]
    items = []
    masks_for_weights = []
    for pid in patients:
        sdir = out / "slices" / pid
        mdir = out / "masks" / pid
        for spath, mpath in zip(_slice_files(sdir), _slice_files(mdir)):
            img = decode_slice_png(spath.read_bytes())
            msk = decode_mask_png(mpath.read_bytes())
            img = resize(normalize_slice(img), (tw, th), "bilinear")
            msk = resize(msk, (tw, th), "nearest")
            items.append((img.pixels, msk.labels.astype(np.int64)))
            masks_for_weights.append(msk.labels)
    return items, masks_for_weights


def _train_config(raw: dict, seed: int) -> TrainConfig:
    fields = {k: raw[k] for k in raw if k in TrainConfig.__dataclass_fields__}
    return TrainConfig(seed=seed, **fields)


def _aug_spec(cfg: dict) -> AugmentationSpec | None:
    a = cfg["augmentation"]
    if not a.get("enabled", True):
        return None
    return AugmentationSpec(
        rotation_deg=float(a["rotation_deg"]), shear_deg=float(a["shear_deg"]),
        brightness=float(a["brightness"]), contrast=float(a["contrast"]),
        hflip=bool(a["hflip"]), prob=float(a["prob"]))


def _coarse_cfg(cfg: dict) -> CoarseNetConfig:
    c = cfg["coarse"]
    return CoarseNetConfig(
        input_hw=(int(cfg["input_size"][1]), int(cfg["input_size"][0])),
        levels=int(c["levels"]), init_channels=int(c["init_channels"]),
        growth=int(c["growth"]), block_layers=int(c["block_layers"]),
        n_classes=int(cfg["n_classes"]))


def _binary_cfg(cfg: dict) -> BinaryNetConfig:
    b = cfg["binary"]
    tw, th = cfg["roi"]["target"]
    return BinaryNetConfig(
        input_hw=(int(th), int(tw)), levels=int(b["levels"]),
        init_channels=int(b["init_channels"]), growth=int(b["growth"]),
        block_layers=int(b["block_layers"]), q_order=int(b["q_order"]),
        pre_squash=bool(b.get("pre_squash", True)))


def _class_weights(cfg: dict, masks, seed: int) -> ClassWeights:
    cw = cfg["class_weights"]
    n = int(cfg["n_classes"])
    if not cw.get("enabled", True):
        return ClassWeights(weights=tuple(1.0 for _ in range(n)), n_classes=n,
                            boost=None, seed=seed)
    boost = None
    if cw.get("boost_class") is not None:
        boost = (resolve_class(cw["boost_class"], n),
                 float(cw.get("boost_factor", 7.0)))
    allow = frozenset(resolve_class(c, n) for c in cw.get("allow_absent", []))
    return compute_class_weights(masks, n_classes=n, boost=boost,
                                 allow_absent=allow, seed=seed)


def cmd_train_coarse(cfg: dict, fold: int, seed: int | None = None) -> dict:
    out = Path(cfg["out"])
    conv = _converted(cfg, "train_coarse")
    plan = _fold_plan(cfg, "train_coarse")
    if not 0 <= fold < plan.k:
        raise PipelineError(f"fold {fold} outside 0..{plan.k - 1}")
    fa = plan.folds[fold]
    base_seed = int(seed if seed is not None else cfg["seed"])

    train_pids, val_pids = list(fa.train), list(fa.val)
    if not val_pids:
        # tiny cohorts can make the 10% window collapse to zero patients;
        # training still needs a validation stream, so borrow one
        val_pids = [train_pids.pop()]
    train_items, train_masks = _load_training_items(cfg, train_pids, conv)
    val_items, _ = _load_training_items(cfg, val_pids, conv)
    weights = _class_weights(cfg, train_masks, base_seed)

    net = build_coarse_net(_coarse_cfg(cfg), seed=_seed_int(base_seed, fold, 1))
    tcfg = _train_config(cfg["coarse"]["train"], seed=_seed_int(base_seed, fold, 2))
    fdir = out / "coarse" / f"fold_{fold}"
    fdir.mkdir(parents=True, exist_ok=True)
    (fdir / "class_weights.json").write_text(weights.to_json())
    best, log = train(net, train_items, val_items, tcfg, "weighted_ce",
                      class_weights=weights.as_array(),
                      aug_spec=_aug_spec(cfg),
                      checkpoint_path=fdir / "checkpoint.eseg")
    (fdir / "log.jsonl").write_text(log.to_jsonl())
    _record(out, cfg, f"coarse/fold_{fold}", f"coarse/fold_{fold}")
    return {"command": "train_coarse", "fold": fold,
            "best_epoch": log.best_epoch, "best_val": log.best_val,
            "epochs": len(log.records), "stop_reason": log.stop_reason,
            "checkpoint": str(fdir / "checkpoint.eseg")}


def _load_coarse_net(cfg: dict, fold: int):
    out = Path(cfg["out"])
    fdir = _require(out, cfg, f"coarse/fold_{fold}", "predict_coarse")
    net = build_coarse_net(_coarse_cfg(cfg), seed=0)
    net.load_state(ckpt.load_checkpoint(fdir / "checkpoint.eseg"))
    return net


def cmd_predict_coarse(cfg: dict, fold: int) -> dict:
    out = Path(cfg["out"])
    conv = _converted(cfg, "predict_coarse")
    plan = _fold_plan(cfg, "predict_coarse")
    fa = plan.folds[fold]
    net = _load_coarse_net(cfg, fold)
    tw, th = cfg["input_size"]
    n_pred = 0
    for pid in (*fa.train, *fa.val, *fa.test):
        sdir = Path(cfg["out"]) / "slices" / pid
        files = _slice_files(sdir)
        if not files:
            raise PipelineError(f"no converted slices for patient {pid}",
                                patient=pid)
        batch = []
        shapes = []
        for f in files:
            img = decode_slice_png(f.read_bytes())
            shapes.append((img.width, img.height))
            batch.append(resize(normalize_slice(img), (tw, th),
                                "bilinear").pixels)
        x = np.stack(batch)[:, None, :, :].astype(np.float32)
        with no_grad():
            probs = net.forward(Tensor(x), train=False)
        pred = probs.data.argmax(axis=1).astype(np.uint8)
        pdir = out / "pred" / f"fold_{fold}" / pid
        pdir.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(files):
            m = LabelMask(labels=pred[i])
            m = resize(m, shapes[i], "nearest")
            (pdir / f.name).write_bytes(encode_mask_png(m))
            n_pred += 1
    _record(out, cfg, f"pred/fold_{fold}", f"pred/fold_{fold}")
    return {"command": "predict_coarse", "fold": fold, "n_slices": n_pred}


def _stacked_masks(d: Path) -> LabelVolume:
    masks = [decode_mask_png(f.read_bytes()) for f in _slice_files(d)]
    if not masks:
        raise PipelineError(f"no mask slices under {d}")
    return stack_predictions(masks)


def cmd_extract_roi(cfg: dict, fold: int, class_id: int | None = None) -> dict:
    out = Path(cfg["out"])
    conv = _converted(cfg, "extract_roi")
    plan = _fold_plan(cfg, "extract_roi")
    fa = plan.folds[fold]
    _require(out, cfg, f"pred/fold_{fold}", "extract_roi")
    n_classes = int(cfg["n_classes"])
    classes = [class_id] if class_id is not None else list(range(1, n_classes))
    pad = int(cfg["roi"]["pad"])
    target = tuple(cfg["roi"]["target"])
    root = Path(cfg["dataset_root"])

    role_of = {}
    for pid in fa.train:
        role_of[pid] = "train"
    for pid in fa.val:
        role_of[pid] = "val"
    for pid in fa.test:
        role_of[pid] = "test"

    per_class: dict[int, dict] = {c: {"patients": {}, "misses": []}
                                  for c in classes}
    for pid, role in role_of.items():
        img_path, mask_path = _patient_paths(root, pid)
        vol = parse_nifti(img_path.read_bytes())
        gt, _ = _label_volume(mask_path, n_classes)
        pred_vol = _stacked_masks(out / "pred" / f"fold_{fold}" / pid)
        for c in classes:
            box = class_bbox(pred_vol, c)
            source = "pred"
            gt_box = class_bbox(gt, c)
            if box is None:
                if gt_box is None:
                    continue  # class truly absent, nothing to extract
                if role == "test":
                    per_class[c]["misses"].append(pid)
                    continue
                box = gt_box  # training-time fallback to the reference box
                source = "gt_fallback"
            box = pad_bbox(box, pad=pad, bounds=vol.dims)
            patches = extract_roi(vol.voxels, gt, box, c, target=target)
            cdir = out / "rois" / f"fold_{fold}" / f"class_{c}" / pid
            cdir.mkdir(parents=True, exist_ok=True)
            for i, (p, m) in enumerate(zip(patches.patches, patches.masks)):
                (cdir / f"img_{i:04d}.png").write_bytes(encode_slice_png(p))
                (cdir / f"msk_{i:04d}.png").write_bytes(encode_mask_png(m))
            per_class[c]["patients"][pid] = {
                "role": role,
                "bbox": {"lo": list(box.lo), "hi": list(box.hi)},
                "n_patches": len(patches.patches),
                "source": source,
            }
    results = {}
    for c in classes:
        payload = {"fold": fold, "class": c, "pad": pad,
                   "target": list(target), **per_class[c]}
        cdir = out / "rois" / f"fold_{fold}" / f"class_{c}"
        cdir.mkdir(parents=True, exist_ok=True)
        (cdir / "manifest.json").write_text(json.dumps(payload, indent=2,
                                                       sort_keys=True))
        _record(out, cfg, f"rois/fold_{fold}/class_{c}",
                f"rois/fold_{fold}/class_{c}/manifest.json")
        results[c] = {"patients": len(per_class[c]["patients"]),
                      "misses": per_class[c]["misses"]}
    return {"command": "extract_roi", "fold": fold, "classes": results}


def _roi_items(out: Path, fold: int, c: int, pids) -> list:
    items = []
    for pid in pids:
        cdir = out / "rois" / f"fold_{fold}" / f"class_{c}" / pid
        if not cdir.exists():
            continue
        imgs = sorted(cdir.glob("img_*.png"))
        msks = sorted(cdir.glob("msk_*.png"))
        for ip, mp in zip(imgs, msks):
            img = normalize_slice(decode_slice_png(ip.read_bytes()))
            msk = decode_mask_png(mp.read_bytes())
            items.append((img.pixels, msk.labels.astype(np.int64)))
    return items


def cmd_train_organ(cfg: dict, fold: int, class_id: int,
                    seed: int | None = None) -> dict:
    out = Path(cfg["out"])
    plan = _fold_plan(cfg, "train_organ")
    fa = plan.folds[fold]
    _require(out, cfg, f"rois/fold_{fold}/class_{class_id}", "train_organ")
    base_seed = int(seed if seed is not None else cfg["seed"])

    train_items = _roi_items(out, fold, class_id, fa.train)
    val_items = _roi_items(out, fold, class_id, fa.val)
    if not val_items:
        # class absent from every validation patient in this fold: borrow the
        # patches of the last contributing train patient for validation
        for pid in reversed(fa.train):
            borrowed = _roi_items(out, fold, class_id, [pid])
            if borrowed:
                val_items = borrowed
                train_items = [it for p in fa.train if p != pid
                               for it in _roi_items(out, fold, class_id, [p])]
                break
    if not train_items or not val_items:
        raise PipelineError(
            f"class {class_id} has no ROI patches to train on in fold {fold}",
            fold=fold, class_id=class_id)

    net = build_binary_net(_binary_cfg(cfg),
                           seed=_seed_int(base_seed, fold, 3, class_id))
    tcfg = _train_config(cfg["binary"]["train"],
                         seed=_seed_int(base_seed, fold, 4, class_id))
    fdir = out / "organ" / f"fold_{fold}" / f"class_{class_id}"
    fdir.mkdir(parents=True, exist_ok=True)
    best, log = train(net, train_items, val_items, tcfg, "composite",
                      aug_spec=_aug_spec(cfg),
                      checkpoint_path=fdir / "checkpoint.eseg")
    (fdir / "log.jsonl").write_text(log.to_jsonl())
    _record(out, cfg, f"organ/fold_{fold}/class_{class_id}",
            f"organ/fold_{fold}/class_{class_id}")
    return {"command": "train_organ", "fold": fold, "class": class_id,
            "best_epoch": log.best_epoch, "best_val": log.best_val,
            "epochs": len(log.records), "stop_reason": log.stop_reason}


# -- evaluation ----------------------------------------------------------------

def _collect_slice_metrics(pred_planes, gt_planes, spacing):
    """Per-slice metric lists, skipping slices empty in both masks."""
    dscs, ious, hds = [], [], []
    undefined = 0
    for pp, gp in zip(pred_planes, gt_planes):
        if not pp.any() and not gp.any():
            continue
        pv = BinaryMaskView(pp, spacing)
        gv = BinaryMaskView(gp, spacing)
        dscs.append(dsc(pv, gv))
        ious.append(iou(pv, gv))
        h = hd95(pv, gv)
        if h is None:
            undefined += 1
        else:
            hds.append(h)
    return dscs, ious, hds, undefined


def _class_result(dscs, ious, hds, undefined, misses) -> ClassResult:
    return ClassResult(
        dsc=float(np.mean(dscs)) if dscs else 0.0,
        iou=float(np.mean(ious)) if ious else 0.0,
        hd95=float(np.mean(hds)) if hds else None,
        n_undefined_hd95=undefined,
        detection_misses=misses,
    )


def _gt_planes(gt: LabelVolume, c: int, axis: int = CORONAL_AXIS):
    return [(np.take(gt.labels, s, axis=axis).T == c)
            for s in range(gt.labels.shape[axis])]


def cmd_evaluate(cfg: dict, fold: int, class_id: int | None = None) -> dict:
    out = Path(cfg["out"])
    conv = _converted(cfg, "evaluate")
    plan = _fold_plan(cfg, "evaluate")
    fa = plan.folds[fold]
    _require(out, cfg, f"pred/fold_{fold}", "evaluate")
    n_classes = int(cfg["n_classes"])
    classes = [class_id] if class_id is not None else list(range(1, n_classes))
    root = Path(cfg["dataset_root"])
    test_set = set(fa.test)

    gt_vols = {}
    spacings = {}
    int_vols = {}
    for pid in fa.test:
        if pid not in test_set:
            raise PipelineError("evaluation would touch a non-test patient",
                                patient=pid)
        img_path, mask_path = _patient_paths(root, pid)
        gt_vols[pid], pixdim = _label_volume(mask_path, n_classes)
        spacings[pid] = (float(pixdim[2]), float(pixdim[0]))  # rows z, cols x
        int_vols[pid] = parse_nifti(img_path.read_bytes())

    # stage 1: restacked argmax predictions against ground truth
    stage1_classes: dict[str, ClassResult] = {}
    for c in classes:
        dscs, ious, hds = [], [], []
        undefined = 0
        misses = 0
        for pid in fa.test:
            pred_vol = _stacked_masks(out / "pred" / f"fold_{fold}" / pid)
            gt = gt_vols[pid]
            if (gt.labels == c).any() and not (pred_vol.labels == c).any():
                misses += 1
            pred_planes = _gt_planes(pred_vol, c)
            gt_planes = _gt_planes(gt, c)
            d, i, h, u = _collect_slice_metrics(pred_planes, gt_planes,
                                                spacings[pid])
            dscs += d
            ious += i
            hds += h
            undefined += u
        stage1_classes[f"class_{c}"] = _class_result(dscs, ious, hds,
                                                     undefined, misses)
    stage1 = aggregate(stage1_classes, stage="stage1", fold=fold)

    # stage 2: organ nets on the extracted boxes, mapped back to full frames
    stage2_classes: dict[str, ClassResult] = {}
    prob_canvases: dict[str, dict[int, np.ndarray]] = {pid: {}
                                                       for pid in fa.test}
    for c in classes:
        man_path = _require(out, cfg, f"rois/fold_{fold}/class_{c}", "evaluate")
        roi_man = json.loads(man_path.read_text())
        ck_dir = _require(out, cfg, f"organ/fold_{fold}/class_{c}", "evaluate")
        net = build_binary_net(_binary_cfg(cfg), seed=0)
        net.load_state(ckpt.load_checkpoint(Path(ck_dir) / "checkpoint.eseg"))

        dscs, ious, hds = [], [], []
        undefined = 0
        misses = len([p for p in roi_man["misses"] if p in test_set])
        for pid in fa.test:
            gt = gt_vols[pid]
            canvas = np.zeros(gt.labels.shape, dtype=np.float32)
            entry = roi_man["patients"].get(pid)
            if entry is not None:
                box = BBox3D(lo=tuple(entry["bbox"]["lo"]),
                             hi=tuple(entry["bbox"]["hi"]))
                cdir = out / "rois" / f"fold_{fold}" / f"class_{c}" / pid
                imgs = sorted(cdir.glob("img_*.png"))
                batch = np.stack([
                    normalize_slice(decode_slice_png(p.read_bytes())).pixels
                    for p in imgs])[:, None, :, :].astype(np.float32)
                with no_grad():
                    probs = net.forward(Tensor(batch), train=False)
                (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
                w_ext, h_ext = x1 - x0 + 1, z1 - z0 + 1
                for s in range(probs.data.shape[0]):
                    plane = GrayscaleSlice(pixels=probs.data[s, 0])
                    back = resize(plane, (w_ext, h_ext), "bilinear").pixels
                    canvas[x0:x1 + 1, y0 + s, z0:z1 + 1] = back.T
            prob_canvases[pid][c] = canvas
            binary = canvas >= 0.5
            pred_planes = [binary[:, s, :].T
                           for s in range(binary.shape[1])]
            gt_planes = _gt_planes(gt, c)
            d, i, h, u = _collect_slice_metrics(pred_planes, gt_planes,
                                                spacings[pid])
            dscs += d
            ious += i
            hds += h
            undefined += u
        stage2_classes[f"class_{c}"] = _class_result(dscs, ious, hds,
                                                     undefined, misses)
    stage2 = aggregate(stage2_classes, stage="stage2", fold=fold)

    # combined multiclass map: above threshold, the higher probability wins
    for pid in fa.test:
        shape = gt_vols[pid].labels.shape
        stackp = np.stack([prob_canvases[pid].get(c, np.zeros(shape,
                                                              dtype=np.float32))
                           for c in classes])
        best = stackp.argmax(axis=0)
        covered = stackp.max(axis=0) >= 0.5
        combined = np.where(covered,
                            np.asarray(classes, dtype=np.uint8)[best], 0)
        cdir = out / "eval" / f"fold_{fold}" / "combined" / pid
        cdir.mkdir(parents=True, exist_ok=True)
        for s in range(combined.shape[1]):
            m = LabelMask(labels=np.ascontiguousarray(
                combined[:, s, :].T.astype(np.uint8)))
            (cdir / f"{s:04d}.png").write_bytes(encode_mask_png(m))

    edir = out / "eval" / f"fold_{fold}"
    edir.mkdir(parents=True, exist_ok=True)
    (edir / "stage1.json").write_text(stage1.to_json())
    (edir / "stage2.json").write_text(stage2.to_json())
    _record(out, cfg, f"eval/fold_{fold}", f"eval/fold_{fold}")
    return {"command": "evaluate", "fold": fold,
            "stage1_mean_dsc": stage1.mean_dsc,
            "stage2_mean_dsc": stage2.mean_dsc,
            "stage1": json.loads(stage1.to_json()),
            "stage2": json.loads(stage2.to_json())}


def cmd_report(cfg: dict, fold: int) -> dict:
    out = Path(cfg["out"])
    edir = _require(out, cfg, f"eval/fold_{fold}", "report")
    stage1 = MetricsReport.from_json((edir / "stage1.json").read_text())
    stage2 = MetricsReport.from_json((edir / "stage2.json").read_text())
    table = render_comparison(stage1, stage2)
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / f"fold_{fold}.txt").write_text(table + "\n")
    payload = {"fold": fold, "stage1": json.loads(stage1.to_json()),
               "stage2": json.loads(stage2.to_json())}
    (rdir / f"fold_{fold}.json").write_text(json.dumps(payload, indent=2,
                                                       sort_keys=True))
    _record(out, cfg, f"report/fold_{fold}", f"report/fold_{fold}.txt")
    return {"command": "report", "fold": fold, "table": table,
            "paths": [str(rdir / f"fold_{fold}.txt"),
                      str(rdir / f"fold_{fold}.json")]}
