"""Release gate: ten desk-scale checks the build must clear before shipping.

Each test is one gate. Budgeted gates assert their own wall-clock limit, so
a pass here means both the math and the runtime hold on a plain CPU box.
"""

import gzip
import json
import math
import struct
import time

import numpy as np
import pytest

from enteroseg import pipeline as pl
from enteroseg import tensor as T
from enteroseg.checkpoint import load_checkpoint
from enteroseg.dataset import FoldPlan, stratified_kfold
from enteroseg.losses import (composite_loss, dice_loss, jaccard_loss,
                              weighted_cross_entropy)
from enteroseg.medio import (LabelMask, decode_mask_png, encode_mask_png,
                             parse_nifti, volume_to_slices)
from enteroseg.metrics import BinaryMaskView, MetricsReport, dsc, hd95, iou
from enteroseg.nets import BinaryNetConfig, build_binary_net
from enteroseg.roi import BBox3D, LabelVolume, class_bbox, extract_roi, pad_bbox
from enteroseg.selfonn import selfonn_forward, selfonn_gradcheck, selfonn_init
from enteroseg.tensor import (BatchNormState, Tensor, batch_norm,
                              concat_channels, conv2d, elementwise_pow,
                              gradcheck, no_grad, pool2d, relu, sigmoid,
                              softmax_channels, tanh, upsample_bilinear)
from enteroseg.training import (EarlyStop, PlateauScheduler, TrainConfig,
                                train)

GRAD_TOL = 1e-4
SELFONN_TOL = 1e-5


# -- gate 1: finite-difference agreement for every differentiable op ----------

def _grad_cases(seed):
    """(label, fn, wrt) triples rebuilt per seed, all float64."""
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    cases = []
    a, b = t(3, 4), t(4)
    cases.append(("add", lambda: elementwise_pow(a + b, 2).sum(), [a, b]))
    c, d = t(3, 4), t(3, 4)
    cases.append(("mul", lambda: elementwise_pow(c * d, 2).sum(), [c, d]))
    e = t(3, 4)
    f_raw = rng.normal(size=(3, 4))
    f = Tensor(f_raw + np.sign(f_raw) * 0.7, requires_grad=True)  # off zero
    cases.append(("div", lambda: elementwise_pow(e / f, 2).sum(), [e, f]))
    for q in (2, 3, 5):
        xq = t(2, 5)
        cases.append((f"pow{q}", lambda xq=xq, q=q: elementwise_pow(xq, q).sum(),
                      [xq]))
    xl = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    cases.append(("log", lambda: T.log(xl).sum(), [xl]))
    raw = rng.normal(size=(3, 4))
    xr = Tensor(raw + np.sign(raw) * 0.2, requires_grad=True)  # off the kink
    cases.append(("relu", lambda: elementwise_pow(relu(xr), 2).sum(), [xr]))
    xs = t(3, 4)
    cases.append(("sigmoid", lambda: elementwise_pow(sigmoid(xs), 2).sum(), [xs]))
    xt = t(3, 4)
    cases.append(("tanh", lambda: elementwise_pow(tanh(xt), 2).sum(), [xt]))
    xm = t(2, 6)
    cases.append(("mean", lambda: elementwise_pow(xm, 2).mean(), [xm]))
    xsm = t(2, 3, 4, 4)
    wsm = Tensor(rng.normal(size=(2, 3, 4, 4)))
    cases.append(("softmax", lambda: (softmax_channels(xsm) * wsm).sum(), [xsm]))

    for stride, padding in ((1, 0), (2, 1)):
        xc, wc, bc = t(2, 3, 5, 5), t(4, 3, 3, 3), t(4)
        cases.append((
            f"conv2d_s{stride}p{padding}",
            lambda xc=xc, wc=wc, bc=bc, s=stride, p=padding:
                elementwise_pow(conv2d(xc, wc, bc, stride=s, padding=p),
                                2).sum(),
            [xc, wc, bc]))
    for kind, padding in (("max", 0), ("max", 1), ("avg", 0)):
        xp = t(2, 2, 6, 6)
        cases.append((
            f"pool_{kind}_p{padding}",
            lambda xp=xp, k=kind, p=padding:
                elementwise_pow(pool2d(xp, k, 2, stride=2, padding=p), 2).sum(),
            [xp]))
    xu = t(1, 2, 3, 3)
    cases.append(("upsample",
                  lambda: elementwise_pow(upsample_bilinear(xu, 2), 2).sum(),
                  [xu]))

    st_tr = BatchNormState(3, dtype=np.float64)
    xbn = t(4, 3, 5, 5)
    wbn = Tensor(rng.normal(size=(4, 3, 5, 5)))
    cases.append(("batch_norm_train",
                  lambda: (batch_norm(xbn, st_tr, training=True) * wbn).sum(),
                  [xbn, st_tr.gamma, st_tr.beta]))
    st_ev = BatchNormState(3, dtype=np.float64)
    st_ev.running_mean[:] = rng.normal(size=3)
    st_ev.running_var[:] = rng.uniform(0.5, 2.0, size=3)
    xbe = t(2, 3, 4, 4)
    cases.append(("batch_norm_eval",
                  lambda: elementwise_pow(
                      batch_norm(xbe, st_ev, training=False), 2).sum(),
                  [xbe, st_ev.gamma, st_ev.beta]))
    x1, x2 = t(1, 2, 3, 3), t(1, 3, 3, 3)
    cases.append(("concat",
                  lambda: elementwise_pow(concat_channels([x1, x2]), 2).sum(),
                  [x1, x2]))

    logits = t(2, 3, 4, 4)
    tce = rng.integers(0, 3, size=(2, 4, 4))
    wce = rng.uniform(0.5, 2.0, size=3)
    cases.append(("weighted_ce",
                  lambda: weighted_cross_entropy(softmax_channels(logits),
                                                 tce, wce),
                  [logits]))
    for label, loss_fn in (("dice", dice_loss), ("jaccard", jaccard_loss),
                           ("composite", composite_loss)):
        lg = t(2, 1, 4, 4)
        tgt = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        cases.append((label,
                      lambda lg=lg, tgt=tgt, fn=loss_fn: fn(sigmoid(lg), tgt),
                      [lg]))
    return cases


def test_01_gradient_suite():
    t0 = time.monotonic()
    failures = []
    for seed in range(5):
        for label, fn, wrt in _grad_cases(seed):
            err = gradcheck(fn, wrt)
            if err > GRAD_TOL:
                failures.append((label, seed, err))
        for q in (1, 2, 3, 5):
            layer = selfonn_init(2, 3, 3, q_order=q, seed=40 + seed,
                                 padding=1, pre_squash=True, dtype=np.float64)
            x = Tensor(np.random.default_rng(90 + seed).normal(
                size=(1, 2, 5, 5)))
            err = selfonn_gradcheck(layer, x)
            if err > SELFONN_TOL:
                failures.append((f"selfonn_q{q}", seed, err))
    assert not failures, f"finite-difference mismatches: {failures}"
    assert time.monotonic() - t0 < 120.0


# -- gate 2: the operational layer degenerates to / expands the convolution ---

def _conv_loop(x, w, bias, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[co]
                    for ci in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += (w[co, ci, u, v]
                                        * xp[ni, ci, i * stride + u,
                                             j * stride + v])
                    out[ni, co, i, j] = acc
    return out


def test_02_selfonn_against_conv_and_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        cin, cout = rng.integers(1, 4), rng.integers(1, 5)
        h, w = rng.integers(5, 10, size=2)
        stride, padding = rng.integers(1, 3), rng.integers(0, 2)
        layer = selfonn_init(cin, cout, 3, q_order=1,
                             seed=int(rng.integers(0, 2 ** 31)),
                             stride=stride, padding=padding, pre_squash=False,
                             dtype=np.float64)
        layer.bias.data = rng.normal(size=cout)
        x = Tensor(rng.normal(size=(2, cin, h, w)))
        got = selfonn_forward(x, layer).data
        want = conv2d(x, layer.weights[0], layer.bias,
                      stride=stride, padding=padding).data
        assert np.abs(got - want).max() <= 1e-6

    for stride in (1, 2):
        for padding in (0, 1):
            layer = selfonn_init(2, 3, 3, q_order=3, seed=5, stride=stride,
                                 padding=padding, pre_squash=True,
                                 dtype=np.float64)
            for wq in layer.weights:
                wq.data = rng.normal(size=wq.data.shape)
            layer.bias.data = rng.normal(size=3)
            x = rng.normal(size=(2, 2, 7, 7))
            got = selfonn_forward(Tensor(x), layer).data
            s = np.tanh(x)
            want = _conv_loop(s, layer.weights[0].data, layer.bias.data,
                              stride, padding)
            for q in (2, 3):
                want += _conv_loop(s ** q, layer.weights[q - 1].data,
                                   np.zeros(3), stride, padding)
            assert np.abs(got - want).max() <= 1e-6


# -- gate 3: overlap and surface-distance metrics against brute force ----------

def _loop_surface(mask):
    fg = {tuple(p) for p in np.argwhere(mask)}
    out = []
    for p in fg:
        exposed = False
        for ax in range(len(p)):
            for step in (-1, 1):
                q = list(p)
                q[ax] += step
                if tuple(q) not in fg:
                    exposed = True
                    break
            if exposed:
                break
        if exposed:
            out.append(p)
    return out


def _oracle_hd95(p, g, spacing):
    ps_list, gs_list = _loop_surface(p), _loop_surface(g)
    if not ps_list or not gs_list:
        return None
    sp = np.asarray(spacing if spacing else (1.0,) * p.ndim, dtype=np.float64)
    ps = np.asarray(sorted(ps_list), dtype=np.float64) * sp
    gs = np.asarray(sorted(gs_list), dtype=np.float64) * sp

    def directed(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        d = np.sort(np.sqrt(d2.min(axis=1)))
        return float(d[math.ceil(0.95 * d.size) - 1])

    return max(directed(ps, gs), directed(gs, ps))


def _random_mask(rng, h, w):
    kind = rng.integers(0, 5)
    if kind == 0:
        return np.zeros((h, w), dtype=bool)
    if kind == 1:
        m = np.zeros((h, w), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            m[y0:rng.integers(y0, h) + 1, x0:rng.integers(x0, w) + 1] = True
        return m
    if kind == 2:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(1.0, min(h, w) / 2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return rng.random((h, w)) < (0.3 if kind == 3 else 0.5)


def test_03_metric_oracles_exact():
    t0 = time.monotonic()
    rng = np.random.default_rng(12)
    blocked_pairs = 0
    for i in range(1000):
        if i < 850:
            h, w = rng.integers(3, 49, size=2)
        else:
            h, w = rng.integers(49, 65, size=2)
        p, g = _random_mask(rng, h, w), _random_mask(rng, h, w)
        spacing = None if i % 10 else (2.0, 0.7)
        pv, gv = BinaryMaskView(p, spacing), BinaryMaskView(g, spacing)

        sp = {tuple(q) for q in np.argwhere(p)}
        sg = {tuple(q) for q in np.argwhere(g)}
        if not sp and not sg:
            d_want, j_want = 1.0, 1.0
        elif not sp or not sg:
            d_want, j_want = 0.0, 0.0
        else:
            d_want = 2 * len(sp & sg) / (len(sp) + len(sg))
            j_want = len(sp & sg) / len(sp | sg)
        d, j = dsc(pv, gv), iou(pv, gv)
        assert d == d_want and j == j_want
        assert abs(d - 2 * j / (1 + j)) < 1e-12
        assert hd95(pv, gv) == _oracle_hd95(p, g, spacing)
        if sp and sg:
            ns = len(_loop_surface(p)) * len(_loop_surface(g))
            blocked_pairs += ns > 2_000_000
    assert blocked_pairs >= 1  # the chunked scan path was exercised
    assert time.monotonic() - t0 < 60.0


# -- gate 4: loss hand values --------------------------------------------------

def test_04_loss_reference_values():
    probs = Tensor(np.full((2, 11, 3, 3), 1 / 11))
    targets = np.random.default_rng(0).integers(0, 11, size=(2, 3, 3))
    got = float(weighted_cross_entropy(probs, targets, np.ones(11)).data)
    assert got == pytest.approx(math.log(11), abs=1e-6)

    pred = np.zeros((1, 1, 4, 4))
    pred[0, 0, 0, :4] = 1                      # |P| = 4
    gt4 = np.zeros((1, 1, 4, 4))
    gt4[0, 0, 0, 2:], gt4[0, 0, 1, :2] = 1, 1  # |G| = 4, I = 2, U = 6
    assert float(jaccard_loss(Tensor(pred), gt4, eps=0.0).data) \
        == pytest.approx(2 / 3, abs=1e-9)
    gt6 = np.zeros((1, 1, 4, 4))
    gt6[0, 0, 0, 2:], gt6[0, 0, 1, :4] = 1, 1  # |G| = 6, I = 2
    assert float(dice_loss(Tensor(pred), gt6, eps=0.0).data) \
        == pytest.approx(0.6, abs=1e-9)

    rng = np.random.default_rng(4)
    soft = Tensor(rng.random((2, 1, 6, 6)))
    tgt = (rng.random((2, 1, 6, 6)) > 0.5).astype(np.float64)
    dl = float(dice_loss(soft, tgt).data)
    jl = float(jaccard_loss(soft, tgt).data)
    assert float(composite_loss(soft, tgt).data) \
        == pytest.approx((dl + jl) / 2, abs=1e-12)


# -- gate 5: box geometry ------------------------------------------------------

def _scan_bbox(labels, cid):
    lo = [None, None, None]
    hi = [None, None, None]
    nx, ny, nz = labels.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if labels[x, y, z] == cid:
                    for ax, v in enumerate((x, y, z)):
                        lo[ax] = v if lo[ax] is None else min(lo[ax], v)
                        hi[ax] = v if hi[ax] is None else max(hi[ax], v)
    if lo[0] is None:
        return None
    return tuple(lo), tuple(hi)


def test_05_roi_boxes_tight_padded_and_fragment_spanning():
    rng = np.random.default_rng(9)
    for _ in range(500):
        dims = tuple(rng.integers(4, 13, size=3))
        labels = np.zeros(dims, dtype=np.uint8)
        cid = int(rng.integers(1, 4))
        for _ in range(rng.integers(1, 9)):
            labels[tuple(rng.integers(0, d) for d in dims)] = cid
        for _ in range(rng.integers(0, 5)):
            labels[tuple(rng.integers(0, d) for d in dims)] = cid + 1
        vol = LabelVolume(labels=labels)
        box = class_bbox(vol, cid)
        want = _scan_bbox(labels, cid)
        if want is None:
            assert box is None
            continue
        assert (box.lo, box.hi) == want
        for ax in range(3):  # tight: every face plane touches the class
            assert (np.take(labels, box.lo[ax], axis=ax) == cid).any()
            assert (np.take(labels, box.hi[ax], axis=ax) == cid).any()

    box = BBox3D(lo=(8, 9, 10), hi=(8, 9, 10))
    assert pad_bbox(box, 0, bounds=(49, 50, 51)) == box
    assert pad_bbox(box, 2, bounds=(49, 50, 51)) \
        == BBox3D(lo=(6, 7, 8), hi=(10, 11, 12))
    assert pad_bbox(box, 40, bounds=(49, 50, 51)) \
        == BBox3D(lo=(0, 0, 0), hi=(48, 49, 50))
    assert pad_bbox(box, 40, bounds=(20, 20, 20)) \
        == BBox3D(lo=(0, 0, 0), hi=(19, 19, 19))

    labels = np.zeros((8, 8, 8), dtype=np.uint8)
    labels[2:4, 2, 2:4] = 1
    labels[2:4, 6, 2:4] = 1          # same class, split along y
    vol = LabelVolume(labels=labels)
    box = class_bbox(vol, 1)
    assert (box.lo[1], box.hi[1]) == (2, 6)
    patches = extract_roi(np.zeros((8, 8, 8), dtype=np.float32), vol, box, 1,
                          target=(4, 4))
    assert len(patches.masks) == 5           # every slice in the gap included
    assert patches.masks[0].labels.any() and patches.masks[-1].labels.any()
    assert not patches.masks[2].labels.any()  # interior gap slice, empty mask


# -- gate 6: fold plans for every cohort size ----------------------------------

def test_06_fold_plans_across_cohort_sizes():
    for n in range(5, 201):
        patients = [f"p{i:03d}" for i in range(n)]
        plan = stratified_kfold(patients, k=5, seed=n)
        tested = []
        for fa in plan.folds:
            train_s, val_s, test_s = set(fa.train), set(fa.val), set(fa.test)
            assert not (train_s & val_s or train_s & test_s or val_s & test_s)
            assert train_s | val_s | test_s == set(patients)
            assert abs(len(test_s) - 0.2 * n) <= 1.0
            assert abs(len(val_s) - 0.1 * n) <= 1.0
            assert abs(len(train_s) - 0.7 * n) <= 1.0
            tested += fa.test
        assert sorted(tested) == patients    # each patient tested exactly once


# -- gate 7: a small operational net can overfit shapes -----------------------

def _ellipse_item(rng, h=64, w=64):
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    ry, rx = rng.uniform(0.15, 0.3) * h, rng.uniform(0.15, 0.3) * w
    yy, xx = np.mgrid[0:h, 0:w]
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img = np.where(mask, 0.8, 0.2) + rng.normal(0, 0.05, (h, w))
    return img.astype(np.float32), mask.astype(np.int64)


def test_07_overfit_smoke():
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    items = [_ellipse_item(rng) for _ in range(20)]
    net = build_binary_net(BinaryNetConfig(
        input_hw=(64, 64), levels=2, init_channels=8, growth=4,
        block_layers=2, q_order=3), seed=3)
    cfg = TrainConfig(lr=2e-3, batch_size=10, max_epochs=40,
                      early_stop_patience=40, plateau_patience=8, seed=3)
    state, log = train(net, items, items, cfg, "composite")
    assert log.records[-1].epoch <= 300
    net.load_state(state)
    x = np.stack([img for img, _ in items])[:, None, :, :]
    with no_grad():
        probs = net.forward(Tensor(x), train=False).data[:, 0]
    scores = [dsc(BinaryMaskView(probs[i] >= 0.5),
                  BinaryMaskView(items[i][1] > 0))
              for i in range(len(items))]
    assert float(np.mean(scores)) >= 0.95
    assert time.monotonic() - t0 < 600.0


# -- gate 8: refinement and weighting move scores the right way ----------------

def _stage1_rare_dsc(out_dir, data_root, test_pids, rare):
    vals = []
    for pid in test_pids:
        gt = parse_nifti((data_root / f"{pid}_mask.nii.gz").read_bytes()).voxels
        files = sorted((out_dir / "pred" / "fold_0" / pid).glob("*.png"))
        for y, f in enumerate(files):
            pred = decode_mask_png(f.read_bytes()).labels == rare
            ref = gt[:, y, :].T == rare
            if not pred.any() and not ref.any():
                continue
            vals.append(dsc(BinaryMaskView(pred), BinaryMaskView(ref)))
    return float(np.mean(vals)) if vals else 0.0


def test_08_directional_two_stage_and_weighting(tmp_path):
    t0 = time.monotonic()
    base = {
        "dataset_root": str(tmp_path / "data"),
        "seed": 101,
        "n_classes": 4,
        "input_size": [32, 32],
        "folds": {"k": 5},
        "phantom": {"dims": [32, 32, 8], "n_patients": 12, "organ_classes": 3,
                    "rare_class": 3, "rare_fraction": 0.7, "noise": 0.04},
        "augmentation": {"enabled": False},
        "coarse": {"levels": 2, "init_channels": 8, "growth": 4,
                   "block_layers": 2,
                   "train": {"lr": 2e-3, "batch_size": 16, "max_epochs": 10,
                             "early_stop_patience": 10,
                             "plateau_patience": 4}},
        "binary": {"levels": 2, "init_channels": 8, "growth": 4,
                   "block_layers": 2, "q_order": 3,
                   "train": {"lr": 2e-3, "batch_size": 16, "max_epochs": 30,
                             "early_stop_patience": 8, "plateau_patience": 4}},
        "roi": {"pad": 4, "target": [16, 16]},
    }
    cfg_w = pl.load_config(None, {**base, "out": str(tmp_path / "weighted"),
        "class_weights": {"enabled": True, "boost_class": 3,
                          "boost_factor": 7.0, "allow_absent": [3]}})
    cfg_u = pl.load_config(None, {**base, "out": str(tmp_path / "uniform"),
        "class_weights": {"enabled": False}})

    pl.cmd_phantom(cfg_w)
    stats = json.loads((tmp_path / "data" / "stats.json").read_text())
    counts = stats["voxel_counts"]
    assert counts["3"] / sum(counts.values()) < 0.005  # rare stays rare

    for cfg in (cfg_w, cfg_u):
        pl.cmd_convert(cfg)
        pl.cmd_split(cfg)
        pl.cmd_train_coarse(cfg, 0)
        pl.cmd_predict_coarse(cfg, 0)
    pl.cmd_extract_roi(cfg_w, 0)
    for c in (1, 2, 3):
        pl.cmd_train_organ(cfg_w, 0, c)
    pl.cmd_evaluate(cfg_w, 0)

    eval_dir = tmp_path / "weighted" / "eval" / "fold_0"
    s1 = MetricsReport.from_json((eval_dir / "stage1.json").read_text())
    s2 = MetricsReport.from_json((eval_dir / "stage2.json").read_text())
    wins = sum(s2.per_class[f"class_{c}"].dsc >= s1.per_class[f"class_{c}"].dsc
               for c in (1, 2, 3))
    assert wins >= 2, f"refinement improved only {wins} of 3 classes"

    plan = FoldPlan.from_json((tmp_path / "weighted" / "folds.json").read_text())
    test_pids = plan.folds[0].test
    rare_w = _stage1_rare_dsc(tmp_path / "weighted", tmp_path / "data",
                              test_pids, 3)
    rare_u = _stage1_rare_dsc(tmp_path / "uniform", tmp_path / "data",
                              test_pids, 3)
    assert rare_w > rare_u, f"weighting did not help: {rare_w} vs {rare_u}"
    assert time.monotonic() - t0 < 1800.0


# -- gate 9: storage round trips ------------------------------------------------

def _nifti_bytes(voxels):
    """Independent little-endian single-file encoding of a float32 volume."""
    nx, ny, nz = voxels.shape
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, 16, 32)
    struct.pack_into("<8f", header, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    vals = []
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                vals.append(voxels[x, y, z])
    return bytes(header) + b"\x00" * 4 + np.asarray(
        vals, dtype="<f4").tobytes()


def test_09_round_trips(tmp_path):
    rng = np.random.default_rng(21)
    voxels = rng.normal(size=(5, 6, 4)).astype(np.float32)
    vol = parse_nifti(gzip.compress(_nifti_bytes(voxels)))
    for axis in range(3):
        slices = volume_to_slices(vol, axis=axis)
        restacked = np.stack([s.pixels.T for s in slices], axis=axis)
        np.testing.assert_array_equal(restacked, voxels)

    for label in range(11):                  # exhaustive uniform masks
        m = LabelMask(labels=np.full((7, 9), label, dtype=np.uint8))
        np.testing.assert_array_equal(
            decode_mask_png(encode_mask_png(m)).labels, m.labels)
    for _ in range(1000):
        h, w = rng.integers(1, 40, size=2)
        m = LabelMask(labels=rng.integers(0, 11, size=(h, w), dtype=np.uint8))
        back = decode_mask_png(encode_mask_png(m))
        np.testing.assert_array_equal(back.labels, m.labels)
        assert back.labels.dtype == np.uint8

    items = [_ellipse_item(rng, 16, 16) for _ in range(10)]
    net = build_binary_net(BinaryNetConfig(
        input_hw=(16, 16), levels=2, init_channels=8, growth=4,
        block_layers=2, q_order=3), seed=5)
    path = tmp_path / "model.eseg"
    cfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=4, seed=5)
    _, log = train(net, items[:7], items[7:], cfg, "composite",
                   checkpoint_path=path)
    fresh = build_binary_net(net.config, seed=404)
    fresh.load_state(load_checkpoint(path))
    x = np.stack([img for img, _ in items[7:]])[:, None, :, :]
    y = np.stack([lbl for _, lbl in items[7:]])[:, None, :, :]
    with no_grad():
        pred = fresh.forward(Tensor(x.astype(np.float32)), train=False)
        val = float(composite_loss(pred, y).data)
    assert val == pytest.approx(log.best_val, abs=1e-6)


# -- gate 10: schedule and stopping on scripted loss sequences ------------------

def test_10_schedule_and_early_stop_scripts():
    sched = PlateauScheduler(lr=1.0, factor=0.5, patience=5)
    lrs = [sched.step(1.0) for _ in range(6)]
    assert lrs == [1.0] * 5 + [0.5]          # halves exactly at patience

    sched = PlateauScheduler(lr=1.0, factor=0.5, patience=5)
    lrs = [sched.step(1.0) for _ in range(15)]
    assert lrs[5] == 0.5 and lrs[10] == 0.25 and lrs[-1] == 0.25
    assert lrs.count(0.5) == 5               # two reductions, no third

    stop = EarlyStop(patience=20)
    fired_at = None
    for i in range(1, 40):
        if stop.step(1.0):
            fired_at = i
            break
    assert fired_at == 21                    # window plus one

    stop = EarlyStop(patience=20)
    assert not any(stop.step(1.0 / i) for i in range(1, 60))
