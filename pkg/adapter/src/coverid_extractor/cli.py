"""Command-line front end for the feature exporter.

Reads a track list JSON, runs the configured feature/text providers over
every track, and writes manifest.json plus the binary feature/teacher files
next to it. Exit codes match the main pipeline tool: 0 success, 1 bad
flags or bad input, 2 unexpected failure. LIVI_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .export import AudioTrack, ExportError, ExportJob, export_features
from .providers import DEFAULT_SPEECH_MODEL, DEFAULT_TEXT_MODEL, ProviderError

log = logging.getLogger("coverid_extractor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:          # argparse would sys.exit(2)
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="coverid-extract", description=__doc__)
    parser.add_argument("--tracks", required=True,
                        help="JSON list of track specs (see --tracks-schema)")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--feature-model", default=DEFAULT_SPEECH_MODEL,
                        help='speech encoder id, or "stub" for deterministic test features')
    parser.add_argument("--text-model", default=DEFAULT_TEXT_MODEL,
                        help='text embedding id, or "stub"')
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes; results do not depend on it")
    parser.add_argument("--raw-window", type=float, default=30.0,
                        help="tile length in seconds for tracks without segments")
    return parser


def _load_tracks(path: str) -> list[AudioTrack]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValueError(f"{path}: track list must be a JSON array")
    tracks = []
    for i, raw in enumerate(doc):
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: entry {i} is not an object")
        try:
            tracks.append(AudioTrack(
                track_id=raw["track_id"], clique_id=raw["clique_id"],
                split=raw["split"], audio_path=raw["audio_path"],
                duration_s=float(raw["duration_s"]), lyrics=raw.get("lyrics"),
                segments=[tuple(s) for s in raw["segments"]] if raw.get("segments") else None,
            ))
        except KeyError as exc:
            raise ValueError(f"{path}: entry {i} is missing field {exc}") from exc
    return tracks


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("LIVI_LOG", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
        job = ExportJob(tracks=_load_tracks(args.tracks), out_dir=args.out,
                        feature_model=args.feature_model, text_model=args.text_model,
                        raw_window_s=args.raw_window)
        result = export_features(job, workers=args.threads)
        for track_id, error in result.failed.items():
            log.warning("skipped %s: %s", track_id, error)
        print(result.manifest_path)
        return 0
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:                       # argparse -h
        return int(exc.code or 0)
    except (ValueError, ExportError, ProviderError, FileNotFoundError,
            json.JSONDecodeError, KeyError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:                        # pragma: no cover - defensive
        log.exception("unexpected failure: %s", exc)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
