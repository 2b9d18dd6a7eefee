"""Writes probmaps.mspm and the features expected from it, computed with numpy."""

import struct
import numpy as np

T, K, C = 15, 16, 5
rng = np.random.default_rng(20240517)


def volume(sharpness):
    logits = rng.normal(size=(T, K, C)) * sharpness
    p = np.exp(logits - logits.max(axis=2, keepdims=True))
    return (p / p.sum(axis=2, keepdims=True)).astype(np.float32)


def entropy(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


volumes = [(3, volume(0.5)), (8, volume(3.0)), (21, volume(0.0))]
# one pass with an exact zero, so 0 ln 0 is exercised
volumes[1][1][0, 0] = np.array([1, 0, 0, 0, 0], dtype=np.float32)

body = b"MSPM" + struct.pack("<HI", 1, len(volumes))
for vid, v in volumes:
    body += struct.pack("<QIIH", vid, T, K, C) + v.astype("<f4").tobytes()
body += struct.pack("<Q", sum(body) % 2**64)
with open("probmaps.mspm", "wb") as f:
    f.write(body)

with open("probmaps_expected.csv", "w") as f:
    f.write("id,bald_max,bald_min,bald_mean,entropy_mean," + ",".join(f"c{c}" for c in range(C)) + "\n")
    for vid, v in volumes:
        p = v.astype(np.float64)
        p /= p.sum(axis=2, keepdims=True)
        mean = p.mean(axis=0)
        bald = np.maximum(entropy(mean) - entropy(p).mean(axis=0), 0.0)
        present = np.zeros(C, dtype=int)
        present[np.unique(mean.argmax(axis=1))] = 1
        row = [bald.max(), bald.min(), bald.mean(), entropy(mean).mean()]
        f.write(f"{vid}," + ",".join(f"{x:.12e}" for x in row) + "," + ",".join(map(str, present)) + "\n")
