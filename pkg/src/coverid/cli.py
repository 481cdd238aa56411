"""Batch command-line front end for the cover-retrieval pipeline.

Subcommands: synth, segment, train, embed, rank, eval, significance,
gradcheck, bench. Exit codes: 0 success, 1 validation error (bad flags,
bad inputs), 2 runtime failure. LIVI_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import evaluation as ev
from . import preprocess as pp
from . import retrieval as rt
from . import synth as sy
from . import training as tr
from .featurestore import (
    FeatureStoreError, Manifest, TrackRecord, load_manifest, read_feature_file,
)

log = logging.getLogger("coverid")

DEFAULT_SEED = 17


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:          # argparse would sys.exit(2)
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="coverid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker pool size; results do not depend on it")
        return p

    p = add("synth", "generate the self-contained synthetic dataset")
    p.add_argument("--out", required=True)

    p = add("segment", "extract vocal segments for every manifest track")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.3,
                   help="global vocalness exclusion threshold")

    p = add("train", "distill the encoder onto the teacher embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True, help="JSON with encoder/optimizer/train sections")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=None, help="override the loss blend weight")
    p.add_argument("--max-steps", type=int, default=None)

    p = add("embed", "encode segments and aggregate per-track embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None, help="restrict to one manifest split")

    p = add("rank", "rank every query against the catalog")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default=None, help="restrict queries to one split (needs --manifest)")

    p = add("eval", "compute MR1 / HR@1 / MAP@10 from rankings + manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rankings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)

    p = add("significance", "paired tests between two metric reports")
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default=None)

    p = add("gradcheck", "finite-difference check of the analytic gradients")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("bench", "time preprocessing vs full-scale forward pass")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--out", default=None)

    return parser


def _load_train_config(path: str, args) -> tuple[enc.EncoderConfig, tr.OptimizerConfig, tr.TrainConfig]:
    doc = json.loads(Path(path).read_text())
    enc_cfg = enc.EncoderConfig.from_dict(doc.get("encoder", {}))
    opt_cfg = tr.OptimizerConfig(**doc.get("optimizer", {}))
    train_doc = dict(doc.get("train", {}))
    if args.alpha is not None:
        train_doc["alpha"] = args.alpha
    if args.max_steps is not None:
        train_doc["max_steps"] = args.max_steps
    if args.seed != DEFAULT_SEED or "seed" not in train_doc:
        train_doc["seed"] = args.seed
    return enc_cfg, opt_cfg, tr.TrainConfig(**train_doc)


def _cmd_synth(args) -> int:
    manifest_path = sy.generate(args.out, sy.SynthConfig(seed=args.seed))
    log.info("synthetic dataset written, manifest at %s", manifest_path)
    print(manifest_path)
    return 0


def _cmd_segment(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = pp.SegmenterConfig(lambda_=args.lambda_)
    doc = {}
    for track_id, result in pp.segment_manifest(manifest.tracks, cfg).items():
        if isinstance(result, pp.Excluded):
            doc[track_id] = {"excluded": True, "global_vocalness": result.global_score}
        else:
            doc[track_id] = {"excluded": False, "segments": [
                {"start_s": s.start_s, "end_s": s.end_s,
                 "pad_left": s.pad_left, "pad_right": s.pad_right} for s in result]}
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    n_excluded = sum(1 for v in doc.values() if v.get("excluded"))
    log.info("segmented %d tracks (%d excluded)", len(doc), n_excluded)
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    enc_cfg, opt_cfg, train_cfg = _load_train_config(args.config, args)
    params = enc.init_params(enc_cfg, seed=train_cfg.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = tr.train(manifest, params, enc_cfg, opt_cfg, train_cfg,
                      out_dir, log_path=out_dir / "train_log.jsonl")
    summary = {
        "best_val_cosine": result.best_val_cosine, "best_step": result.best_step,
        "steps_run": result.steps_run, "stopped_early": result.stopped_early,
        "checkpoint": str(result.checkpoint_path),
    }
    (out_dir / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def _track_embeddings(manifest: Manifest, params, enc_cfg, split: str | None) -> list[rt.TrackEmbedding]:
    tracks = manifest.split(split) if split else manifest.tracks
    out = []
    for track in tracks:
        records = read_feature_file(manifest.resolve(track.feature_path))
        segs = [enc.encode_segment(r.data.astype(np.float64), params, enc_cfg) for r in records]
        out.append(rt.aggregate_track(track.track_id, segs))
    return out


def _cmd_embed(args) -> int:
    manifest = load_manifest(args.manifest)
    params, enc_cfg = enc.load_checkpoint(args.checkpoint)
    embeddings = _track_embeddings(manifest, params, enc_cfg, args.split)
    rt.save_track_embeddings(args.out, embeddings)
    log.info("wrote %d track embeddings to %s", len(embeddings), args.out)
    return 0


def _cmd_rank(args) -> int:
    catalog = rt.load_track_embeddings(args.embeddings)
    queries = catalog
    if args.split:
        if not args.manifest:
            raise UsageError("--split requires --manifest")
        manifest = load_manifest(args.manifest)
        wanted = {t.track_id for t in manifest.split(args.split)}
        queries = [e for e in catalog if e.track_id in wanted]
    rankings = rt.rank_all(queries, catalog)
    rt.write_rankings(args.out, rankings)
    log.info("ranked %d queries over %d catalog tracks", len(queries), len(catalog))
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    rankings = rt.read_rankings(args.rankings)
    judgments = ev.judgments_from_manifest(manifest, rankings, split=args.split)
    report = ev.retrieval_metrics(judgments)
    ev.save_metric_report(args.out, report)
    print(f"MR1 = {report.mr1:.5g}  HR@1 = {report.hr1:.5g}  MAP@10 = {report.map10:.5g}  "
          f"({report.n_queries} queries)")
    return 0


def _cmd_significance(args) -> int:
    report_a = ev.load_metric_report(args.report_a)
    report_b = ev.load_metric_report(args.report_b)
    sig = ev.significance_report(report_a, report_b, alpha=args.alpha)
    for t, reject in zip(sig.tests, sig.rejected):
        method = "exact" if t.exact else "approx"
        extra = "  (degenerate)" if t.degenerate else ""
        print(f"{t.name:16s} p = {t.p_value:.6g} [{method}, n={t.n}] "
              f"{'REJECT' if reject else 'keep'}{extra}")
    if args.out:
        Path(args.out).write_text(json.dumps(sig.to_dict(), indent=2) + "\n")
    return 0


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = enc.EncoderConfig(d_w=8, l_max=5, d_k=8, mlp_hidden=(6, 5), d_out=4)
    params = enc.init_params(cfg, seed=args.seed)
    batch = [rng.normal(size=(5, 8)) for _ in range(3)]
    teachers = rng.normal(size=(3, 4))
    worst = 0.0
    for alpha in (0.0, 0.5, 1.0):
        errors = enc.gradient_check(batch, teachers, params, cfg,
                                    tr.LossConfig(alpha=alpha), step=args.step)
        worst = max(worst, max(errors.values()))
    print(f"max relative error: {worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if worst < args.tolerance else 1


def _cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    seg_cfg = pp.SegmenterConfig()

    pre_ms = []
    for i in range(args.n):
        scores = np.clip(rng.normal(0.5, 0.3, size=80), 0.0, 1.0).tolist()
        track = TrackRecord(track_id=f"bench{i}", clique_id="bench", split="train",
                            duration_s=240.0, vocalness=scores, feature_path="unused")
        t0 = time.perf_counter()
        pp.extract_segments(track, seg_cfg)
        pre_ms.append(1000.0 * (time.perf_counter() - t0))

    cfg = enc.EncoderConfig(d_w=1280, l_max=1500, d_k=1280)
    params = enc.init_params(cfg, seed=args.seed)
    H = rng.normal(size=(1500, 1280))
    fwd_ms = []
    for _ in range(args.n):
        t0 = time.perf_counter()
        enc.encode_segment(H, params, cfg)
        fwd_ms.append(1000.0 * (time.perf_counter() - t0))

    report = {
        "n": args.n,
        "preprocess_ms": {"mean": float(np.mean(pre_ms)), "std": float(np.std(pre_ms))},
        "forward_ms": {"mean": float(np.mean(fwd_ms)), "std": float(np.std(fwd_ms))},
        "param_count": params.count(),
    }
    print(json.dumps(report, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return 0


_COMMANDS = {
    "synth": _cmd_synth, "segment": _cmd_segment, "train": _cmd_train,
    "embed": _cmd_embed, "rank": _cmd_rank, "eval": _cmd_eval,
    "significance": _cmd_significance, "gradcheck": _cmd_gradcheck, "bench": _cmd_bench,
}


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("LIVI_LOG", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:                       # argparse -h
        return int(exc.code or 0)
    except (ValueError, FeatureStoreError, enc.EncoderError,
            FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:                        # pragma: no cover - defensive
        log.exception("unexpected failure: %s", exc)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
