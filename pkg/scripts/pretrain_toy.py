#!/usr/bin/env python3
"""Toy masked-feature-distillation pre-training run on synthetic data."""

import sys

from vimshuffle.cli import main

DEFAULTS = [
    "pretrain", "--set", "epochs=20", "--set", "batch_size=32",
    "--set", "base_lr=0.002", "--set", "warmup_epochs=2", "--set", "weight_decay=0.01",
    "--set", "train_samples=512",
    "--set", "model.depth=2", "--set", "model.width=32", "--set", "model.state_size=2",
    "--set", "model.patch_size=8", "--set", "model.cls_token=false", "--set", "model.expand=1",
]

if __name__ == "__main__":
    sys.exit(main(DEFAULTS + sys.argv[1:]))
