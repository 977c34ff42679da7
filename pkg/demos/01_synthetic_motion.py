"""
Synthetic motion data and the views built from it
=================================================

Walks through the toy skeleton dataset: class sinusoid tables, the
body-part topology, and the augmented / masked views a training batch sees.
"""

import numpy as np

from pcm3.augment import IntraParams, apply_mask, intra_transform, make_mask, random_mix
from pcm3.data import SynthConfig, class_tables, default_partition, generate_synthetic
from pcm3.rng import stream

cfg = SynthConfig()
train, test = generate_synthetic(cfg)
print("train", train.sequences.shape, "test", test.sequences.shape)

# Every (class, joint) pair owns an integer frequency and a per-axis amplitude.
freqs, amps = class_tables(cfg)
for c in range(3):
    print(f"class {c}: freqs {freqs[c, :6].astype(int)}...  mean amplitude {amps[c].mean():.3f}")

# Distances: same-class pairs sit slightly closer than different-class pairs.
X = train.sequences.reshape(len(train), -1)
sq = (X ** 2).sum(1)
D = np.sqrt(np.maximum(sq[:, None] + sq[None] - 2 * X @ X.T, 0))
same = train.labels[:, None] == train.labels[None]
off = ~np.eye(len(X), dtype=bool)
print(f"mean distance  intra-class {D[same & off].mean():.3f}  inter-class {D[~same].mean():.3f}")

# Five body parts of three joints each.
part = default_partition(cfg.joints)
for name, joints in part.parts:
    print(f"{name:<11} {joints}")

# One sample's views.
g = stream(0, "demo")
s, partner = train.sequences[0], train.sequences[150]
intra = intra_transform(s, IntraParams(), g)
mix = random_mix(intra, intra_transform(partner, IntraParams(), g), g, part)
spec = make_mask(cfg.frames, cfg.joints, part, 0.6, 4, "topology", g)
print(f"intra view moved by {np.abs(intra - s).mean():.3f} on average")
print(f"inter view: {mix.kind} with lambda {mix.lam:.2f}")
print(f"topology mask hides {spec.masked_count} of {spec.visible.size} cells")

# Rows are frames, columns joints; '#' marks a hidden cell.
for row in spec.visible:
    print("".join("." if v else "#" for v in row))
masked = apply_mask(s, spec)
print("masked cells are zero:", bool(np.all(masked[spec.visible == 0] == 0)))
