"""Shared experiment configs for the tests."""
from __future__ import annotations

import numpy as np


def tiny_synth_config(out_dir=None, epochs: int = 2, mode: str = "tie", seed: int = 0, **tie) -> dict:
    """A small three-blob run that finishes in a couple of seconds."""
    r = 4.0 / np.sqrt(3.0)
    angles = np.pi / 2 + np.arange(3) * 2 * np.pi / 3
    settings = {"epochs": epochs, "lr_clf": 3e-3, "batch_size": 32, "clf_hidden": [16, 8],
                "gen_hidden": [16, 16], "latent_dim": 4, "per_class_inversions": 8,
                "inversion_steps": 3, "inversion_batch": 16} | tie
    cfg = {
        "data": {"kind": "synth", "means": [[float(r * np.cos(a)), float(r * np.sin(a))] for a in angles],
                 "stds": [0.5, 0.5, 0.5], "samples_per_class": 60, "ood_count": 60},
        "tie": settings,
        "seed": seed,
        "mode": mode,
    }
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    return cfg
