"""Write the synthetic training corpus and a masked copy of a held-out set.

    python3 demos/01_toy_corpus.py work/

Produces work/train/*.wav (10 clips), work/clean/*.wav and work/masked/*.wav
(10 held-out clips, the latter with a 250 ms gap each).
"""

import sys
from pathlib import Path

import numpy as np

from wavelldm.pipeline.audio import DegradationSpec, degrade, toy_corpus, write_corpus

root = Path(sys.argv[1] if len(sys.argv) > 1 else "work")
write_corpus(root / "train", toy_corpus(10, seed=0))

held_out = toy_corpus(10, seed=1000)
write_corpus(root / "clean", held_out)
masked = []
for i, clip in enumerate(held_out):
    out, info = degrade(clip, DegradationSpec("mask", 250), np.random.default_rng([1000, i]))
    masked.append(out)
    print(f"clip_{i:03d}: gap at {info.mask_start / 48:.0f} ms, {info.mask_length} samples")
write_corpus(root / "masked", masked)
