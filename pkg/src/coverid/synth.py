"""Self-contained synthetic dataset for the end-to-end pipeline.

Teacher embeddings are drawn around mutually orthogonal cluster centroids
(one cluster per clique, so cluster separation is 90 degrees), and frame
matrices are a fixed orthonormal lift of each teacher plus noise. A linear
map therefore recovers the teacher from the frames, which makes the
distillation target attainable quickly at toy scale. The generator also
emits the training config used by the pipeline commands.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featurestore import (
    FrameFeatures, Manifest, TeacherEmbedding, TrackRecord, save_manifest,
    write_feature_file,
)


@dataclass
class SynthConfig:
    n_cliques: int = 8
    per_clique: int = 8
    d_w: int = 16
    n_frames: int = 10
    d_out: int = 8
    teacher_noise: float = 0.02
    frame_noise: float = 0.05
    seed: int = 17

    def __post_init__(self) -> None:
        if self.n_cliques < 2 or self.per_clique < 2:
            raise ValueError("need at least 2 cliques with 2 tracks each")
        if self.n_cliques > self.d_out:
            raise ValueError("orthogonal centroids need n_cliques <= d_out")
        if self.per_clique < 3:
            raise ValueError("per-clique split needs >= 3 tracks (train/val/test)")


# Training settings sized for the toy dimensions: the stock warmup schedule
# (peak 1e-4 over 10k steps) cannot move a fresh encoder measurably within a
# 2000-step budget, so the emitted config shortens warmup and raises the peak.
TOY_TRAIN_CONFIG = {
    "encoder": {
        "d_w": 16, "l_max": 10, "d_k": 16,
        "mlp_hidden": [32, 24], "d_out": 8,
    },
    "optimizer": {
        "lr_peak": 3e-3, "warmup_steps": 100,
    },
    "train": {
        "epochs": 1000, "batch_size": 16, "alpha": 0.5, "seed": 17,
        "eval_interval": 100, "patience": 20, "max_steps": 2000,
        "target_val_cosine": 0.99,
    },
}


def orthonormal_rows(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """n mutually orthonormal vectors in R^d (n <= d), rows of the result."""
    q, _ = np.linalg.qr(rng.normal(size=(d, n)))
    return q.T[:n]


def generate(out_dir: str | Path, cfg: SynthConfig | None = None) -> Path:
    """Write feature/teacher files, a manifest, and a train config; return the manifest path.

    Split per clique: all but the last two tracks train, then one val, one test.
    """
    cfg = cfg or SynthConfig()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "teachers").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    centroids = orthonormal_rows(cfg.n_cliques, cfg.d_out, rng)
    lift = orthonormal_rows(cfg.d_out, cfg.d_w, rng).T      # (d_w, d_out), orthonormal columns

    n_windows = 10                                          # 30 s of 3 s vocalness windows
    tracks = []
    for c in range(cfg.n_cliques):
        for k in range(cfg.per_clique):
            track_id = f"syn{c:02d}_{k}"
            teacher = centroids[c] + cfg.teacher_noise * rng.normal(size=cfg.d_out)
            teacher = teacher / np.linalg.norm(teacher)
            frames = (lift @ teacher)[None, :] + cfg.frame_noise * rng.normal(
                size=(cfg.n_frames, cfg.d_w))

            feature_path = f"features/{track_id}.livf"
            teacher_path = f"teachers/{track_id}.livt"
            write_feature_file(out_dir / feature_path,
                               [FrameFeatures(0, frames.astype(np.float32))])
            write_feature_file(out_dir / teacher_path,
                               [TeacherEmbedding(0, teacher.astype(np.float32))])

            if k < cfg.per_clique - 2:
                split = "train"
            elif k == cfg.per_clique - 2:
                split = "val"
            else:
                split = "test"
            tracks.append(TrackRecord(
                track_id=track_id, clique_id=f"clique{c:02d}", split=split,
                duration_s=30.0, vocalness=[1.0] * n_windows,
                feature_path=feature_path, teacher_path=teacher_path,
            ))

    manifest = Manifest(tracks=tracks, base_dir=out_dir)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    (out_dir / "train_config.json").write_text(json.dumps(TOY_TRAIN_CONFIG, indent=2) + "\n")
    return manifest_path
