"""The operations behind every service endpoint and CLI subcommand.

Each run function is pure given its arguments (plus the files it reads),
returns plain data structures that serialize cleanly, and never touches
process-global state, so the same code serves HTTP handlers, the CLI,
and tests.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import geometry, hss, kitti_io, losses, metrics
from .config import RunConfig
from .decoder import DecoderTrace, depth_context_features, run_decoder
from .losses import LossWeights
from .mini_nn import ParamStore, mlp_forward, save_tensor_blob, sigmoid, softmax
from .voxel_grid import (
    GridSpec,
    SemanticGrid,
    SubdivisionMask,
    build_histogram_pyramid,
    generate_synthetic_scene,
    homogeneity_stats,
    subdivision_mask,
)

GRADCHECK_THRESHOLD = 1e-4
_FD_H = 1e-4


# ---------------------------------------------------------------------------
# stats


@dataclass
class StatsResult:
    rows: list[dict]
    failures: list[dict]
    csv_text: str
    num_frames: int


def _stats_columns(num_classes: int) -> list[str]:
    return [
        "frame",
        "level",
        "dims",
        "total_voxels",
        "total_defined",
        "requires_split",
        "homogeneous_fraction",
        "homogeneous_fraction_all",
    ] + [f"class_{k}" for k in range(num_classes)]


def _stats_frame(
    label_path: Path,
    dims: tuple[int, int, int],
    voxel_size: float,
    remap: kitti_io.RemapTable,
    levels: int,
) -> list[dict]:
    invalid = label_path.with_suffix(".invalid")
    grid = kitti_io.load_voxel_frame(
        label_path,
        dims,
        voxel_size,
        remap,
        invalid_path=invalid if invalid.exists() else None,
    )
    rows = []
    for st in homogeneity_stats(grid, levels):
        row = {
            "frame": label_path.stem,
            "level": st.level,
            "dims": "x".join(str(d) for d in st.dims),
            "total_voxels": st.total_voxels,
            "total_defined": st.total_defined,
            "requires_split": st.requires_split,
            "homogeneous_fraction": st.homogeneous_fraction,
            "homogeneous_fraction_all": st.homogeneous_fraction_all,
        }
        for k, n in enumerate(st.per_class_counts):
            row[f"class_{k}"] = int(n)
        rows.append(row)
    return rows


def stats_run(
    data_dir: str | Path,
    levels: int = 2,
    dims: tuple[int, int, int] = (256, 256, 32),
    voxel_size: float = 0.2,
    remap_path: str | Path | None = None,
    workers: int = 1,
) -> StatsResult:
    """Homogeneity statistics over every .label frame in a directory.

    Emits one CSV row per (frame, level) plus one aggregate row per level
    with frame = "ALL", whose fractions are recomputed from the summed
    counts.  Per-frame failures are reported and skipped; an empty
    directory is an error.
    """
    data_dir = Path(data_dir)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if not data_dir.is_dir():
        raise ValueError(f"not a directory: {data_dir}")
    frames = sorted(data_dir.glob("*.label"))
    if not frames:
        raise ValueError(f"no .label files under {data_dir}")
    remap = (
        kitti_io.default_remap()
        if remap_path is None
        else kitti_io.RemapTable.from_json(remap_path)
    )

    def work(path: Path):
        try:
            return path.stem, _stats_frame(path, dims, voxel_size, remap, levels), None
        except Exception as e:  # per-file fault isolation
            return path.stem, None, f"{type(e).__name__}: {e}"

    if workers == 1:
        results = [work(p) for p in frames]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, frames))
    results.sort(key=lambda r: r[0])

    rows: list[dict] = []
    failures: list[dict] = []
    agg: dict[int, dict] = {}
    for stem, frame_rows, err in results:
        if err is not None:
            failures.append({"frame": stem, "error": err})
            continue
        rows.extend(frame_rows)
        for row in frame_rows:
            a = agg.setdefault(
                row["level"],
                {
                    "dims": row["dims"],
                    "total_voxels": 0,
                    "total_defined": 0,
                    "requires_split": 0,
                    "class_counts": np.zeros(remap.num_classes, dtype=np.int64),
                },
            )
            a["total_voxels"] += row["total_voxels"]
            a["total_defined"] += row["total_defined"]
            a["requires_split"] += row["requires_split"]
            a["class_counts"] += np.array(
                [row[f"class_{k}"] for k in range(remap.num_classes)]
            )
    for level in sorted(agg):
        a = agg[level]
        n_def, n_all = a["total_defined"], a["total_voxels"]
        row = {
            "frame": "ALL",
            "level": level,
            "dims": a["dims"],
            "total_voxels": n_all,
            "total_defined": n_def,
            "requires_split": a["requires_split"],
            "homogeneous_fraction": (
                1.0 - a["requires_split"] / n_def if n_def else 1.0
            ),
            "homogeneous_fraction_all": 1.0 - a["requires_split"] / n_all,
        }
        for k in range(remap.num_classes):
            row[f"class_{k}"] = int(a["class_counts"][k])
        rows.append(row)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_stats_columns(remap.num_classes))
    writer.writeheader()
    writer.writerows(rows)
    return StatsResult(
        rows=rows,
        failures=failures,
        csv_text=buf.getvalue(),
        num_frames=len(frames),
    )


# ---------------------------------------------------------------------------
# eval


@dataclass
class EvalResult:
    metrics: dict
    table: str
    frames_evaluated: list[str]
    skipped: list[str]


def eval_run(
    pred_dir: str | Path,
    gt_dir: str | Path,
    dims: tuple[int, int, int] = (256, 256, 32),
    voxel_size: float = 0.2,
    num_classes: int | None = None,
    remap_path: str | Path | None = None,
    use_remap: bool = True,
    class_names: list[str] | None = None,
    workers: int = 1,
) -> EvalResult:
    """Aggregate SSC metrics of prediction volumes against ground truth.

    Frames are matched by .label file stem; a prediction without a ground
    truth file never happens (gt drives the frame list), and a ground
    truth without prediction is skipped and reported.  With use_remap
    both volumes pass through the remap table; otherwise they must
    already hold training ids below num_classes.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise ValueError(f"not a directory: {d}")
    frames = sorted(gt_dir.glob("*.label"))
    if not frames:
        raise ValueError(f"no .label files under {gt_dir}")
    remap = None
    if use_remap:
        remap = (
            kitti_io.default_remap()
            if remap_path is None
            else kitti_io.RemapTable.from_json(remap_path)
        )
        num_classes = remap.num_classes
        if class_names is None:
            class_names = list(remap.names)
    elif num_classes is None:
        raise ValueError("num_classes is required when use_remap is false")

    def load(path: Path, invalid_path: Path | None) -> SemanticGrid:
        if remap is not None:
            return kitti_io.load_voxel_frame(
                path, dims, voxel_size, remap, invalid_path=invalid_path
            )
        labels = kitti_io.read_label_volume(path, dims).astype(np.int32)
        valid = np.ones(dims, dtype=bool)
        if invalid_path is not None:
            valid = ~kitti_io.read_bitgrid(invalid_path, dims)
        spec = GridSpec(dims=dims, voxel_size=voxel_size)
        return SemanticGrid(
            spec=spec, labels=labels, num_classes=num_classes, valid=valid
        )

    def work(gt_path: Path):
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            return gt_path.stem, None, "missing prediction"
        invalid = gt_path.with_suffix(".invalid")
        gt = load(gt_path, invalid if invalid.exists() else None)
        pred = load(pred_path, None)
        return gt_path.stem, metrics.accumulate(pred, gt), None

    if workers == 1:
        results = [work(p) for p in frames]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, frames))
    results.sort(key=lambda r: r[0])

    total = metrics.ConfusionMatrix.empty(num_classes)
    evaluated, skipped = [], []
    for stem, cm, err in results:
        if err is not None:
            skipped.append(stem)
            continue
        total = total + cm
        evaluated.append(stem)
    if not evaluated:
        raise ValueError("no frame had both prediction and ground truth")
    report = metrics.ssc_metrics(total)
    return EvalResult(
        metrics=report,
        table=metrics.format_report(report, class_names),
        frames_evaluated=evaluated,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# gradcheck


def _fd_gradient(f, x: np.ndarray, h: float = _FD_H) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        dn = f(x)
        flat[i] = keep
        gf[i] = (up - dn) / (2.0 * h)
    return g


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(
        float(np.max(np.abs(analytic), initial=0.0)),
        float(np.max(np.abs(fd), initial=0.0)),
        1e-12,
    )
    return float(np.max(np.abs(analytic - fd), initial=0.0)) / scale


def _away_from_recall_kink(
    pred: np.ndarray, fracs: np.ndarray, mode: str, defined: np.ndarray
) -> bool:
    """Reject instances whose recall term sits on the |log| kink."""
    xd, pd = pred[defined], fracs[defined]
    if mode == "geo":
        pairs = [(1.0 - xd[:, 0], 1.0 - pd[:, 0])]
    else:
        pairs = [(xd[:, j], pd[:, j]) for j in range(pred.shape[1])]
    for x, p in pairs:
        m = p > 0
        if not m.any():
            continue
        a, g = float(x[m].sum()), float(p.sum())
        if a <= 0 or abs(np.log(a / g)) < 1e-3:
            return False
    return True


def _gen_scal_instance(rng: np.random.Generator, onehot: bool, mode: str):
    for _ in range(200):
        n = int(rng.integers(3, 7))
        c = int(rng.integers(2, 5))
        pred = rng.uniform(0.05, 0.95, size=(n, c))
        pred /= pred.sum(axis=1, keepdims=True)
        defined = rng.random(n) > 0.2
        if not defined.any():
            continue
        if onehot:
            labels = rng.integers(0, c, size=n)
            fracs = np.zeros((n, c))
            fracs[np.arange(n), labels] = 1.0
        else:
            fracs = rng.uniform(0.0, 1.0, size=(n, c))
            fracs[rng.random((n, c)) < 0.4] = 0.0
            keep = fracs.sum(axis=1) > 0
            fracs[~keep, rng.integers(0, c, size=int((~keep).sum()))] = 1.0
            fracs /= fracs.sum(axis=1, keepdims=True)
        if _away_from_recall_kink(pred, fracs, mode, defined):
            return pred, fracs, defined
    raise RuntimeError("could not sample a kink-free affinity instance")


def _check_loss(name: str, make, trials: int, seed: int, corrupt: str | None):
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([seed, hash(name) % (2**31), t])
        f, x, analytic = make(rng)
        fd = _fd_gradient(f, x)
        if corrupt == name and t == 0:
            analytic = analytic.copy()
            analytic.reshape(-1)[0] += 1e-3
        worst = max(worst, _rel_err(analytic, fd))
    return {
        "loss": name,
        "trials": trials,
        "max_rel_err": worst,
        "threshold": GRADCHECK_THRESHOLD,
        "passed": bool(worst < GRADCHECK_THRESHOLD),
    }


def _total_loss_instance(rng: np.random.Generator):
    c = 3
    spec = GridSpec(dims=(4, 4, 2), voxel_size=1.0)
    labels = rng.integers(0, c, size=(4, 4, 2)).astype(np.int32)
    valid = rng.random((4, 4, 2)) > 0.15
    if not valid.any():
        valid[0, 0, 0] = True
    gt = SemanticGrid(spec=spec, labels=labels, num_classes=c, valid=valid)
    hist = build_histogram_pyramid(gt, 1)[0]
    defined = hist.flat_defined
    n_low = hist.spec.num_voxels
    k = min(2, int(defined.sum()))
    sel = hss.select_topk(rng.random(n_low), k, eligible=defined)
    low = rng.uniform(-2, 2, size=(n_low, c))
    high = rng.uniform(-2, 2, size=(8 * k, c))
    scores = rng.uniform(0.05, 0.95, size=n_low)
    weights = LossWeights(ce_class_weights=rng.uniform(0.5, 2.0, size=c))
    probs = softmax(low, axis=-1)
    if not _away_from_recall_kink(probs, hist.flat_fractions, "geo", defined):
        return None
    return gt, sel, low, high, scores, weights


def gradcheck_run(
    seed: int = 0, trials: int = 100, corrupt: str | None = None
) -> dict:
    """Finite-difference verification of every analytic loss gradient.

    Per loss, `trials` random instances are generated away from the
    non-differentiable seams (the |log| recall kink, the smooth-L1 elbow,
    clamp boundaries), the analytic gradient is compared against central
    differences with step 1e-4, and the worst vector-relative error
    max|a - fd| / max(|a|, |fd|) is reported against the 1e-4 threshold.

    `corrupt` names a row whose analytic gradient is deliberately
    perturbed, as a negative control hook for tests.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")

    def scal_case(onehot: bool, mode: str):
        fn = losses.scal_onehot if onehot else losses.multiclass_scal

        def make(rng):
            pred, fracs, defined = _gen_scal_instance(rng, onehot, mode)
            res = fn(pred, fracs, mode, defined)

            def f(x):
                return fn(x, fracs, mode, defined).value

            return f, pred, res.grad

        return make

    def ce_case(hard: bool):
        def make(rng):
            n = int(rng.integers(3, 7))
            c = int(rng.integers(2, 5))
            logits = rng.uniform(-2, 2, size=(n, c))
            w = rng.uniform(0.5, 2.0, size=c)
            valid = rng.random(n) > 0.2
            if not valid.any():
                valid[0] = True
            if hard:
                targets = rng.integers(0, c, size=n)
            else:
                targets = rng.uniform(0.0, 1.0, size=(n, c))
                targets /= targets.sum(axis=1, keepdims=True)
            res = losses.weighted_ce(logits, targets, w, valid)

            def f(x):
                return losses.weighted_ce(x, targets, w, valid).value

            return f, logits, res.grad

        return make

    def bce_make(rng):
        spec = GridSpec(dims=(2, 2, 2), voxel_size=1.0)
        defined = rng.random(8) > 0.25
        if not defined.any():
            defined[0] = True
        req = defined & (rng.random(8) > 0.5)
        sm = SubdivisionMask(
            spec=spec,
            requires_split=req.reshape(2, 2, 2),
            defined=defined.reshape(2, 2, 2),
        )
        scores = rng.uniform(0.05, 0.95, size=8)
        res = losses.split_bce(scores, sm)

        def f(x):
            return losses.split_bce(x, sm).value

        return f, scores, res.grad

    def smooth_make(rng):
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        while True:
            pred = rng.uniform(-2, 2, size=shape)
            target = rng.uniform(-2, 2, size=shape)
            if np.all(np.abs(np.abs(pred - target) - 1.0) > 10 * _FD_H):
                break
        valid = rng.random(shape) > 0.2
        if not valid.any():
            valid[0, 0] = True
        res = losses.smooth_l1(pred, target, valid)

        def f(x):
            return losses.smooth_l1(x, target, valid).value

        return f, pred, res.grad

    def total_case(which: str):
        def make(rng):
            inst = None
            while inst is None:
                inst = _total_loss_instance(rng)
            gt, sel, low, high, scores, weights = inst
            rep = losses.total_loss(low, high, scores, gt, sel, weights)
            if which == "low":
                x, grad = low, rep.low.grad
            elif which == "high":
                x, grad = high, rep.high.grad
            else:
                x, grad = scores, rep.bce.grad

            def f(v):
                args = {
                    "low": (v, high, scores),
                    "high": (low, v, scores),
                    "bce": (low, high, v),
                }[which]
                return losses.total_loss(*args, gt, sel, weights).total

            return f, x, grad

        return make

    cases = [
        ("multiclass_scal_geo", scal_case(False, "geo")),
        ("multiclass_scal_sem", scal_case(False, "sem")),
        ("scal_onehot_geo", scal_case(True, "geo")),
        ("scal_onehot_sem", scal_case(True, "sem")),
        ("weighted_ce_soft", ce_case(False)),
        ("weighted_ce_hard", ce_case(True)),
        ("split_bce", bce_make),
        ("smooth_l1", smooth_make),
        ("total_loss_low", total_case("low")),
        ("total_loss_high", total_case("high")),
        ("total_loss_bce", total_case("bce")),
    ]
    rows = [
        _check_loss(name, make, trials, seed, corrupt) for name, make in cases
    ]
    return {"rows": rows, "all_passed": all(r["passed"] for r in rows)}


# ---------------------------------------------------------------------------
# demo


def _head_layers(params: ParamStore, name: str, c: int, out: int):
    return [
        (
            params.get(f"head/{name}/w1", (c, c)),
            params.get(f"head/{name}/b1", (c,), init="zeros"),
        ),
        (
            params.get(f"head/{name}/w2", (c, out)),
            params.get(f"head/{name}/b2", (out,), init="zeros"),
        ),
    ]


def demo_run(
    config: RunConfig,
    out_dir: str | Path,
    seed: int | None = None,
    k: int | None = None,
    rule: str | None = None,
) -> dict:
    """End-to-end synthetic pipeline; writes grids and returns the summary.

    Synthesizes a scene, renders its depth map, seeds voxel proposals,
    runs the decoder, scores and selects coarse voxels (learned head or
    entropy rule), subdivides them, recombines to a full-resolution
    prediction, and reports losses, subdivision recall, and SSC metrics
    against the synthetic ground truth.  Deterministic for fixed config
    plus overrides.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = config.seed if seed is None else int(seed)
    k_requested = config.k if k is None else int(k)
    rule = config.selection_rule if rule is None else rule
    if rule not in ("learned", "entropy"):
        raise ValueError(f"unknown selection rule {rule!r}")
    if k_requested < 0:
        raise ValueError("k must be >= 0")

    full_spec = config.grid.to_spec()
    low_spec = full_spec.halved()
    dcfg = config.decoder.to_decoder_config()
    c_model = dcfg.channels
    n_cls = config.num_classes
    rig = config.camera.to_rig()

    gt = generate_synthetic_scene(
        full_spec, n_cls, config.synthetic_heterogeneity, seed
    )
    occupied = full_spec.voxel_centers()[gt.occupancy.reshape(-1)]
    depth = geometry.render_depth_map(occupied, rig)
    proposal = geometry.depth_to_voxel_proposals(
        depth, rig, low_spec, dilation=config.proposal_dilation
    )
    proj = geometry.project_voxel_centers(low_spec, rig)

    params = ParamStore(seed)
    feats = depth_context_features(depth, dcfg, params)
    trace = DecoderTrace()
    q_low = run_decoder(
        feats,
        proposal.reshape(-1),
        proj.in_fov,
        proj.ref_norm,
        low_spec,
        dcfg,
        params,
        trace,
    )
    flat = q_low.reshape(c_model, -1).T  # [n_low, C]

    low_logits = mlp_forward(flat, _head_layers(params, "cls", c_model, n_cls))
    split_scores = sigmoid(
        mlp_forward(flat, _head_layers(params, "split", c_model, 1))[:, 0]
    )
    sel_scores = (
        split_scores if rule == "learned" else hss.entropy_scores(low_logits)
    )
    k_eff = min(k_requested, low_spec.num_voxels)
    selection = hss.select_topk(sel_scores, k_eff)

    split_layers = [
        (
            params.get("head/subdiv/w1", (c_model, 2 * c_model)),
            params.get("head/subdiv/b1", (2 * c_model,), init="zeros"),
        ),
        (
            params.get("head/subdiv/w2", (2 * c_model, 8 * c_model)),
            params.get("head/subdiv/b2", (8 * c_model,), init="zeros"),
        ),
    ]
    children = hss.subdivide_selected(flat, selection, split_layers)
    high_logits = mlp_forward(
        children.features, _head_layers(params, "cls", c_model, n_cls)
    )
    pred = hss.recombine_predictions(
        low_logits, high_logits, selection, low_spec, num_classes=n_cls
    )

    weights = LossWeights(
        lambda1=config.lambda1,
        lambda2=config.lambda2,
        hard_low_targets=config.hard_low_targets,
    )
    pyramid = build_histogram_pyramid(gt, 1)[0]
    report = losses.total_loss(
        low_logits, high_logits, split_scores, gt, selection,
        weights, pyramid=pyramid,
    )
    recall = hss.subdivision_recall(selection, subdivision_mask(pyramid))
    cm = metrics.accumulate(pred, gt)
    scores_report = metrics.ssc_metrics(cm)

    kitti_io.write_label_volume(out_dir / "pred.label", pred.labels)
    kitti_io.write_label_volume(out_dir / "gt.label", gt.labels)
    kitti_io.write_bitgrid(out_dir / "pred.bin", pred.occupancy)
    selection.save(out_dir / "selection.json")
    written = ["pred.label", "gt.label", "pred.bin", "selection.json"]
    if config.dump_features:
        save_tensor_blob(out_dir / "q_low", {"q_low": q_low})
        written += ["q_low.bin", "q_low.json"]

    attn_ok = all(
        np.abs(e["row_sums"] - 1.0).max() <= 1e-9 and e["min_weight"] >= 0.0
        for e in trace.entries
    )
    summary = {
        "seed": seed,
        "rule": rule,
        "k_requested": k_requested,
        "k_effective": k_eff,
        "grid_dims": list(full_spec.dims),
        "low_dims": list(low_spec.dims),
        "num_classes": n_cls,
        "losses": {"total": report.total, **report.parts},
        "subdivision_recall": recall,
        "metrics": scores_report,
        "attention_rows_normalized": bool(attn_ok),
        "proposal_voxels": int(proposal.sum()),
        "fov_voxels": int(proj.in_fov.sum()),
        "outputs": written,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# ---------------------------------------------------------------------------
# bench


def bench_run(
    k: int,
    dims: tuple[int, int, int] = (256, 256, 32),
    channels: int = 32,
    num_classes: int = 20,
) -> dict:
    """Analytic dense-vs-hierarchical cost comparison.

    The dense path materializes every full-resolution voxel; the
    hierarchical path materializes the half-resolution grid plus the 8K
    children of the selected voxels.  Bytes assume float64 feature rows;
    FLOP counts cover the classifier head (2 * C * num_classes multiply-
    adds per voxel) plus, for the hierarchical path, the subdivision MLP
    (2 * C * 8C per selected parent).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if any(d < 2 or d % 2 for d in dims):
        raise ValueError("dims must be even and >= 2")
    n_high = dims[0] * dims[1] * dims[2]
    n_low = n_high // 8
    hier_voxels = n_low + 8 * k
    head = 2 * channels * num_classes
    dense = {
        "voxels": n_high,
        "bytes": n_high * channels * 8,
        "head_flops": n_high * head,
    }
    hier = {
        "voxels": hier_voxels,
        "bytes": hier_voxels * channels * 8,
        "head_flops": hier_voxels * head,
        "subdivision_mlp_flops": k * 2 * channels * 8 * channels,
    }
    ratio = hier_voxels / n_high
    return {
        "k": int(k),
        "dims": list(dims),
        "low_dims": [d // 2 for d in dims],
        "channels": channels,
        "num_classes": num_classes,
        "dense": dense,
        "hierarchical": hier,
        "memory_touch_ratio": ratio,
        "flop_ratio": (hier["head_flops"] + hier["subdivision_mlp_flops"])
        / dense["head_flops"],
    }
