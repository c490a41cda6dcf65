"""Command line interface.

Subcommands cover the whole workflow: synth (make a toy dataset), extract
(frames -> feature files), pretrain (stage one, images), finetune (stage
two, videos), predict, evaluate (fold or cross-dataset reports), ablate
(pooling-variant grid), gradcheck (backprop vs finite differences), and
benchmark (stage timings).

Conventions shared by every subcommand:
  * usage errors exit 1, data errors 2, numeric failures 3,
  * anything written to disk goes through a temp file and an atomic rename,
  * a run_config.json lands next to the outputs recording the exact
    arguments (no timestamps, sorted keys), so reruns are comparable
    byte for byte,
  * BVQA_THREADS caps feature-extraction parallelism.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .backbone import ExtractorSpec, extract_features, load_features, save_features
from .errors import (
    BvqaError,
    ConfigError,
    DataError,
    DegenerateInputError,
    NumericError,
)
from .ingest import (
    load_frame_sequence,
    load_manifest,
    resolve_feature_path,
    split_dataset,
    synth_dataset,
)
from .metrics import KNOWN_CALIBRATION_TAGS, calibrate_inlsa, eval_report
from .nncore import check_gradients, mse_loss
from .patcher import DEFAULT_PATCH, DEFAULT_STRIDE
from .pooling import (
    SPATIAL_KINDS,
    TEMPORAL_KINDS,
    SpatialPoolConfig,
    TemporalPoolConfig,
    init_model_params,
    model_param_count,
    predict_video,
    video_forward,
)
from .trainer import (
    TrainConfig,
    finetune,
    load_checkpoint,
    load_pretrain_checkpoint,
    model_from_checkpoint,
    pretrain_spatial,
    save_model_checkpoint,
    save_pretrain_checkpoint,
)
from .autodiff import as_node


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this project reserves 2 for
    data problems, so usage errors are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_text_atomic(path, text: str) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_run_config(directory, command: str, args) -> None:
    skip = {"func"}
    doc = {k: (sorted(v) if isinstance(v, (set, frozenset)) else v)
           for k, v in vars(args).items() if k not in skip}
    doc["command"] = command
    os.makedirs(directory, exist_ok=True)
    _write_text_atomic(os.path.join(os.fspath(directory), "run_config.json"),
                       json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _thread_count() -> int:
    raw = os.environ.get("BVQA_THREADS", "")
    if not raw:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"BVQA_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"BVQA_THREADS must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# shared argument groups


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spatial-kind", default="bilstm", choices=SPATIAL_KINDS)
    p.add_argument("--spatial-hidden", type=int, default=64)
    p.add_argument("--spatial-fc", type=int, default=256)
    p.add_argument("--n-patches", type=int, default=None,
                   help="patch count for concatenate pooling (default: from data)")
    p.add_argument("--temporal-kind", default="bilstm", choices=TEMPORAL_KINDS)
    p.add_argument("--temporal-hidden", type=int, default=64)
    p.add_argument("--temporal-fc", type=int, default=128)


def _add_train_args(p: argparse.ArgumentParser, epochs: int) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze", action="append", default=[],
                   help="parameter prefix to keep fixed (repeatable)")
    p.add_argument("--holdout-frac", type=float, default=0.0)
    p.add_argument("--stop-at-train-mse", type=float, default=None)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                       seed=args.seed, freeze=frozenset(args.freeze),
                       holdout_frac=args.holdout_frac,
                       stop_at_train_mse=args.stop_at_train_mse)


def _spatial_config(args, n_patches: int | None = None) -> SpatialPoolConfig:
    n = args.n_patches if args.n_patches is not None else n_patches
    return SpatialPoolConfig(kind=args.spatial_kind, hidden=args.spatial_hidden,
                             fc_out=args.spatial_fc,
                             n_patches=n if args.spatial_kind == "concatenate" else None)


def _temporal_config(args) -> TemporalPoolConfig:
    return TemporalPoolConfig(kind=args.temporal_kind, hidden=args.temporal_hidden,
                              fc_out=args.temporal_fc)


def _load_dataset(records, features_dir):
    """(records, feature tensors) with a uniform feature dimension."""
    tensors = [load_features(resolve_feature_path(r, features_dir)) for r in records]
    dims = {t.dim for t in tensors}
    if len(dims) > 1:
        raise DataError(f"feature files disagree on dimension: {sorted(dims)}")
    return tensors


def _calibrated(records, mode: str):
    """Apply the cross-corpus score alignment per the --calibrate policy."""
    out = []
    for r in records:
        known = r.tag in KNOWN_CALIBRATION_TAGS
        if mode == "on" or (mode == "auto" and known):
            out.append(replace(r, mos=calibrate_inlsa(r.mos, r.tag)))
        else:
            out.append(r)
    return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    records = synth_dataset(args.out, n_videos=args.videos, n_frames=args.frames,
                            height=args.height, width=args.width, seed=args.seed,
                            levels=args.levels, tag=args.tag)
    _write_run_config(args.out, "synth", args)
    print(f"wrote {len(records)} videos under {args.out}")
    return 0


# ---------------------------------------------------------------------------
# extract


def _extract_one(record, args, spec):
    out_path = resolve_feature_path(record, args.out)
    if record.source.endswith(".bvqf"):
        raise DataError(f"{record.video_id}: source is already a feature file")
    frames = load_frame_sequence(record.source, frame_stride=args.frame_stride)
    tensor = extract_features(frames, spec, patch=args.patch, stride=args.stride)
    save_features(tensor, out_path, overwrite=args.overwrite)
    return out_path


def cmd_extract(args) -> int:
    records = load_manifest(args.manifest)
    spec = ExtractorSpec(kind="tiny-builtin", dim=args.dim, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    threads = _thread_count()
    failures = []

    def work(record):
        try:
            return record.video_id, _extract_one(record, args, spec), None
        except BvqaError as exc:
            return record.video_id, None, str(exc)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(work, records))
    for vid, path, err in results:
        if err is None:
            print(f"{vid}\t{path}")
        else:
            print(f"{vid}\tFAILED\t{err}", file=sys.stderr)
            failures.append(vid)
    _write_run_config(args.out, "extract", args)
    if failures:
        print(f"{len(failures)} of {len(records)} videos failed", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# pretrain / finetune


def _pretrain_images(records, tensors):
    """Stage-one examples: every frame becomes an image scored with its
    video's subjective score."""
    images = []
    for record, tensor in zip(records, tensors):
        for frame in tensor.data:
            images.append((np.asarray(frame, dtype=np.float64), record.mos))
    return images


def cmd_pretrain(args) -> int:
    records = load_manifest(args.manifest)
    tensors = _load_dataset(records, args.features)
    s_cfg = _spatial_config(args, n_patches=tensors[0].n_patches)
    cfg = _train_config(args)
    result = pretrain_spatial(_pretrain_images(records, tensors), s_cfg, cfg)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_pretrain_checkpoint(args.out, result, cfg)
    _write_text_atomic(args.out + ".train_log.jsonl", result.log.to_jsonl_text())
    _write_run_config(out_dir, "pretrain", args)
    print(f"pretrained spatial stage -> {args.out} "
          f"(final train mse {result.log.final_train_mse:.6f})")
    return 0


def cmd_finetune(args) -> int:
    records = load_manifest(args.manifest)
    tensors = _load_dataset(records, args.features)
    s_cfg = _spatial_config(args, n_patches=tensors[0].n_patches)
    t_cfg = _temporal_config(args)
    cfg = _train_config(args)
    init_spatial = None
    if args.pretrained is not None:
        pre = load_pretrain_checkpoint(args.pretrained)
        if pre.spatial_cfg != s_cfg:
            raise ConfigError("pretrained checkpoint spatial configuration "
                              f"({pre.spatial_cfg}) does not match the requested one "
                              f"({s_cfg})")
        init_spatial = pre.spatial
    videos = [(t.data, r.mos) for t, r in zip(tensors, records)]
    result = finetune(videos, s_cfg, t_cfg, cfg, init_spatial=init_spatial,
                      resume=args.resume, checkpoint_dir=args.checkpoint_dir)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    epoch = result.log.entries[-1].epoch if result.log.entries else args.epochs
    save_model_checkpoint(args.out, result.model, cfg, epoch, result.adam)
    _write_text_atomic(args.out + ".train_log.jsonl", result.log.to_jsonl_text())
    _write_run_config(out_dir, "finetune", args)
    print(f"finetuned model -> {args.out} "
          f"(final train mse {result.log.final_train_mse:.6f})")
    return 0


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    records = load_manifest(args.manifest)
    tensors = _load_dataset(records, args.features)
    rows = [(r.video_id, predict_video(model, t)) for r, t in zip(records, tensors)]
    if args.out:
        text = "id,pred\n" + "".join(f"{vid},{score!r}\n" for vid, score in rows)
        _write_text_atomic(args.out, text)
        print(f"wrote {len(rows)} predictions -> {args.out}")
    else:
        for vid, score in rows:
            print(f"{vid}\t{score!r}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _train_and_score(train, test, s_cfg, t_cfg, cfg, init_spatial=None):
    result = finetune([(t.data, r.mos) for r, t in train], s_cfg, t_cfg, cfg,
                      init_spatial=init_spatial)
    preds = np.array([predict_video(result.model, t.data) for _, t in test])
    mos = np.array([r.mos for r, _ in test])
    return preds, mos, result


def cmd_evaluate(args) -> int:
    cross = args.test_manifest is not None
    if cross == (args.manifest is not None):
        raise ConfigError("evaluate needs either --manifest (fold mode) or "
                          "--train-manifest with --test-manifest (cross mode)")
    if cross and args.train_manifest is None:
        raise ConfigError("--test-manifest needs --train-manifest")
    cfg = _train_config(args)
    t_cfg = _temporal_config(args)
    init_spatial = None
    if args.pretrained is not None:
        init_spatial = load_pretrain_checkpoint(args.pretrained).spatial

    scatters = []
    if cross:
        train_recs = _calibrated(load_manifest(args.train_manifest), args.calibrate)
        test_recs = _calibrated(load_manifest(args.test_manifest), args.calibrate)
        train_feats = _load_dataset(train_recs, args.train_features or args.features)
        test_feats = _load_dataset(test_recs, args.test_features or args.features)
        s_cfg = _spatial_config(args, n_patches=train_feats[0].n_patches)
        preds, mos, _ = _train_and_score(list(zip(train_recs, train_feats)),
                                         list(zip(test_recs, test_feats)),
                                         s_cfg, t_cfg, cfg, init_spatial)
        fold_pairs = [(preds, mos)]
        scatters.append([(r.video_id, r.mos, p) for r, p in zip(test_recs, preds)])
        meta = {"mode": "cross", "train_manifest": args.train_manifest,
                "test_manifest": args.test_manifest, "calibrate": args.calibrate,
                "epochs": args.epochs, "seed": args.seed}
    else:
        records = _calibrated(load_manifest(args.manifest), args.calibrate)
        tensors = _load_dataset(records, args.features)
        s_cfg = _spatial_config(args, n_patches=tensors[0].n_patches)
        by_id = {r.video_id: (r, t) for r, t in zip(records, tensors)}
        fold_pairs = []
        for train_recs, test_recs in split_dataset(records, n_folds=args.folds,
                                                   train_frac=args.train_frac,
                                                   seed=args.seed):
            train = [by_id[r.video_id] for r in train_recs]
            test = [by_id[r.video_id] for r in test_recs]
            preds, mos, _ = _train_and_score(train, test, s_cfg, t_cfg, cfg,
                                             init_spatial)
            fold_pairs.append((preds, mos))
            scatters.append([(r.video_id, r.mos, p)
                             for (r, _), p in zip(test, preds)])
        meta = {"mode": "folds", "folds": args.folds, "train_frac": args.train_frac,
                "calibrate": args.calibrate, "epochs": args.epochs, "seed": args.seed}

    report = eval_report(fold_pairs, meta=meta)
    os.makedirs(args.out, exist_ok=True)
    _write_text_atomic(os.path.join(args.out, "report.json"), report.to_json_text())
    _write_text_atomic(os.path.join(args.out, "report.csv"), report.to_csv_text())
    for i, rows in enumerate(scatters):
        text = "id,mos,pred\n" + "".join(f"{vid},{m!r},{p!r}\n" for vid, m, p in rows)
        _write_text_atomic(os.path.join(args.out, f"scatter_fold{i}.csv"), text)
    _write_run_config(args.out, "evaluate", args)
    print(report.to_csv_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    records = load_manifest(args.manifest)
    tensors = _load_dataset(records, args.features)
    d = tensors[0].dim
    by_id = {r.video_id: (r, t) for r, t in zip(records, tensors)}
    (train_recs, test_recs), = split_dataset(records, n_folds=1,
                                             train_frac=args.train_frac,
                                             seed=args.seed)
    train = [by_id[r.video_id] for r in train_recs]
    test = [by_id[r.video_id] for r in test_recs]
    cfg = _train_config(args)
    os.makedirs(args.out, exist_ok=True)

    pretrain_arms = {"off": [False], "on": [True], "both": [False, True]}[args.pretraining]
    pretrain_cache: dict[str, object] = {}

    def pretrained_spatial(s_cfg):
        key = f"{s_cfg.kind}_h{s_cfg.hidden}_f{s_cfg.fc_out}_n{s_cfg.n_patches}"
        if key not in pretrain_cache:
            images = _pretrain_images([r for r, _ in train], [t for _, t in train])
            result = pretrain_spatial(images, s_cfg, cfg)
            save_pretrain_checkpoint(
                os.path.join(args.out, f"cache_pretrain_{key}.npz"), result, cfg)
            pretrain_cache[key] = result.spatial
        return pretrain_cache[key]

    lines = ["spatial,temporal,pretrained,n_params,srocc,plcc,krcc,rmse,note"]
    for s_kind, t_kind, pre in itertools.product(args.spatial, args.temporal,
                                                 pretrain_arms):
        ns = {t.n_patches for _, t in train} | {t.n_patches for _, t in test}
        if s_kind == "concatenate" and len(ns) > 1:
            raise DataError("concatenate pooling needs a uniform patch count, "
                            f"got {sorted(ns)}")
        s_cfg = SpatialPoolConfig(kind=s_kind, hidden=args.spatial_hidden,
                                  fc_out=args.spatial_fc,
                                  n_patches=ns.pop() if s_kind == "concatenate" else None)
        t_cfg = TemporalPoolConfig(kind=t_kind, hidden=args.temporal_hidden,
                                   fc_out=args.temporal_fc)
        init_spatial = pretrained_spatial(s_cfg) if pre else None
        preds, mos, _ = _train_and_score(train, test, s_cfg, t_cfg, cfg, init_spatial)
        try:
            row = eval_report([(preds, mos)]).folds[0]
        except DegenerateInputError as exc:
            nan = float("nan")
            row = {"srocc": nan, "plcc": nan, "krcc": nan, "rmse": nan,
                   "note": str(exc)}
        n_params = model_param_count(d, s_cfg, t_cfg)
        lines.append(",".join([
            s_kind, t_kind, str(pre).lower(), str(n_params),
            repr(row["srocc"]), repr(row["plcc"]), repr(row["krcc"]),
            repr(row["rmse"]), str(row.get("note", "")).replace(",", ";")]))
        print(lines[-1])
    _write_text_atomic(os.path.join(args.out, "grid.csv"), "\n".join(lines) + "\n")
    _write_run_config(args.out, "ablate", args)
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_cases():
    """One shape-cycled case per pooling pair, plus size corners for the
    doubly recurrent pair."""
    ts = [1, 2, 3, 4, 5]
    ns = [5, 4, 3, 2, 1]
    cases = []
    for idx, (s_kind, t_kind) in enumerate(itertools.product(SPATIAL_KINDS,
                                                             TEMPORAL_KINDS)):
        cases.append((s_kind, t_kind, ts[idx % 5], ns[idx % 5],
                      [4, 8][idx % 2], [2, 4][(idx // 2) % 2]))
    cases.append(("bilstm", "bilstm", 1, 1, 4, 2))
    cases.append(("bilstm", "bilstm", 5, 5, 8, 4))
    return cases


def _run_gradcheck_case(s_kind, t_kind, t, n, d, k, eps, rng_seed, mangle=None):
    s_cfg = SpatialPoolConfig(kind=s_kind, hidden=k, fc_out=4,
                              n_patches=n if s_kind == "concatenate" else None)
    t_cfg = TemporalPoolConfig(kind=t_kind, hidden=k, fc_out=4)
    model = init_model_params(d, s_cfg, t_cfg, seed=rng_seed,
                              with_pretrain_head=False)
    if t_kind in ("harmonic", "geometric"):
        # keep per-frame scores comfortably positive: at the clamp floor the
        # scores stop moving, gradients collapse, and the finite-difference
        # probes would only measure noise
        model.head.W.value = model.head.W.value * 0.1
        model.head.b.value = model.head.b.value + 2.0
    feats = np.random.default_rng([rng_seed, 17]).normal(size=(t, n, d))
    target = as_node(np.asarray(3.0))

    def build_loss():
        return mse_loss(video_forward(model, feats), target)

    return check_gradients(build_loss, model.named_params(), eps=eps, mangle=mangle)


def cmd_gradcheck(args) -> int:
    cases = _gradcheck_cases()
    if args.quick:
        cases = cases[:4]
    mangle = None
    if args.inject_bug:
        def mangle(grads):
            name = sorted(grads)[0]
            grads[name] = -grads[name]
    failures = []
    for i, (s_kind, t_kind, t, n, d, k) in enumerate(cases):
        report = _run_gradcheck_case(s_kind, t_kind, t, n, d, k,
                                     eps=args.eps, rng_seed=i,
                                     mangle=mangle)
        ok = report.passed(args.tol)
        status = "ok" if ok else f"FAIL worst={report.worst_param}"
        print(f"spatial={s_kind:<11s} temporal={t_kind:<9s} T={t} N={n} d={d} "
              f"K={k} max_rel_err={report.max_rel_err:.3e} {status}")
        if not ok:
            failures.append((s_kind, t_kind, report.worst_param, report.max_rel_err))
    if failures:
        print(f"{len(failures)} of {len(cases)} cases failed gradient "
              f"verification", file=sys.stderr)
        return 3
    print(f"all {len(cases)} cases passed (tol {args.tol:g})")
    return 0


# ---------------------------------------------------------------------------
# benchmark


def cmd_benchmark(args) -> int:
    if args.videos < 1:
        raise ConfigError(f"benchmark needs at least one video, got {args.videos}")
    stage_rows = []
    totals = []
    for _ in range(args.repeats):
        stages = {}
        t_start = time.perf_counter()
        with tempfile.TemporaryDirectory() as work:
            t0 = time.perf_counter()
            records = synth_dataset(os.path.join(work, "data"), n_videos=args.videos,
                                    n_frames=args.frames, height=args.height,
                                    width=args.width, seed=args.seed)
            stages["synth_s"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            spec = ExtractorSpec(kind="tiny-builtin", dim=args.dim, seed=args.seed)
            tensors = []
            for record in records:
                frames = load_frame_sequence(record.source)
                tensors.append(extract_features(frames, spec))
            stages["extract_s"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            s_cfg = SpatialPoolConfig(kind="bilstm", hidden=8, fc_out=8)
            t_cfg = TemporalPoolConfig(kind="bilstm", hidden=8, fc_out=8)
            videos = [(t.data, r.mos) for t, r in zip(tensors, records)]
            result = finetune(videos, s_cfg, t_cfg,
                              TrainConfig(epochs=1, seed=args.seed))
            stages["train_epoch_s"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            for tensor in tensors:
                predict_video(result.model, tensor)
            stages["predict_s"] = time.perf_counter() - t0
        totals.append(time.perf_counter() - t_start)
        stage_rows.append(stages)

    doc = {name: float(np.median([row[name] for row in stage_rows]))
           for name in stage_rows[0]}
    doc["total_s"] = float(np.median(totals))
    doc["videos"] = args.videos
    doc["frames"] = args.frames
    doc["repeats"] = args.repeats
    print(json.dumps(doc, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> _Parser:
    parser = _Parser(prog="bvqa", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic degraded dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--height", type=int, default=224)
    p.add_argument("--width", type=int, default=224)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--levels", type=float, nargs="+", default=None)
    p.add_argument("--tag", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="frames -> per-video feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=DEFAULT_PATCH)
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    p.add_argument("--frame-stride", type=int, default=1)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pretrain", help="stage one: train the spatial stage on images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    _add_model_args(p)
    _add_train_args(p, epochs=200)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage two: train the video scorer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pretrained", default=None,
                   help="stage-one checkpoint to seed the spatial stage")
    p.add_argument("--resume", default=None)
    p.add_argument("--checkpoint-dir", default=None)
    _add_model_args(p)
    _add_train_args(p, epochs=200)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="score videos with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="train/test folds or cross-dataset report")
    p.add_argument("--manifest", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--train-manifest", default=None)
    p.add_argument("--test-manifest", default=None)
    p.add_argument("--train-features", default=None)
    p.add_argument("--test-features", default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--calibrate", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--pretrained", default=None)
    p.add_argument("--out", required=True)
    _add_model_args(p)
    _add_train_args(p, epochs=200)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="grid over pooling variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spatial", nargs="+", default=list(SPATIAL_KINDS),
                   choices=SPATIAL_KINDS)
    p.add_argument("--temporal", nargs="+", default=list(TEMPORAL_KINDS),
                   choices=TEMPORAL_KINDS)
    p.add_argument("--pretraining", choices=("off", "on", "both"), default="off")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--spatial-hidden", type=int, default=8)
    p.add_argument("--spatial-fc", type=int, default=8)
    p.add_argument("--temporal-hidden", type=int, default=8)
    p.add_argument("--temporal-fc", type=int, default=8)
    _add_train_args(p, epochs=20)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="verify backprop against finite differences")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--quick", action="store_true",
                   help="first four cases only")
    p.add_argument("--inject-bug", action="store_true",
                   help="flip one gradient's sign to prove the check catches it")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("benchmark", help="per-stage wall-clock timings")
    p.add_argument("--videos", type=int, default=2)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"bvqa: configuration error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"bvqa: numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"bvqa: data error: {exc}", file=sys.stderr)
        return 2
    except BvqaError as exc:
        print(f"bvqa: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
