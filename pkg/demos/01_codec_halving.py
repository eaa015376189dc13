"""Train the toy codecs at 50 Hz and 25 Hz and show that 25 Hz halves the token sequence.

Run: python3 demos/01_codec_halving.py
"""

import math

from desktts import codec, recipes, world
from desktts.config import ExperimentConfig

cfg = ExperimentConfig()
codecs = {rate: recipes.build_codec(cfg, rate) for rate in (50, 25)}
corpus = [u.mel for u in recipes.codec_corpus(cfg)]

for rate, m in codecs.items():
    stats = codec.codebook_stats(corpus, m)
    print(f"{rate} Hz: recon MSE {codec.reconstruction_mse(corpus, m):.4f}, codebook use {stats['utilization']:.2f}")

u = world.random_corpus(1, seed=5, min_len=20, max_len=20)[0]
n50, n25 = (len(codec.encode(u.mel, codecs[r])) for r in (50, 25))
print(f"{u.mel.n_frames} mel frames -> {n50} tokens at 50 Hz, {n25} at 25 Hz (ceil({n50}/2) = {math.ceil(n50 / 2)})")
