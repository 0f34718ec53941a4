"""Independent reimplementation of the hashed bag-of-words embedder.

Prints the cosine for each pair so the Rust golden values can be checked.
"""
import math
import re
import struct
import sys

def fnv1a64(data):
    h = 0xcbf29ce484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return h

def tokens(text):
    return re.findall(r"[^\W_]+|[^\s\w]|_", text.lower())

def embed(text, dim=256, seed=0):
    v = [0.0] * dim
    for t in tokens(text):
        h = fnv1a64(struct.pack("<Q", seed) + t.encode())
        v[h % dim] += -1.0 if h >> 63 else 1.0
    return v

def cosine(a, b):
    x, y = embed(a), embed(b)
    dot = sum(p * q for p, q in zip(x, y))
    return dot / math.sqrt(sum(p * p for p in x) * sum(q * q for q in y))

PAIRS = [
    ("red box left", "blue sky above"),
    ("red box left", "the red box on the left of the table"),
    ("the mug", "The mug, next to the laptop."),
]

if __name__ == "__main__":
    for a, b in PAIRS:
        print(f"{a!r} {b!r} {cosine(a, b)!r}")
    sys.exit(0)
