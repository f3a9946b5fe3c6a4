#!/usr/bin/env python3
"""Independent float64 reference for the block and encoder golden vectors.

Re-implements the SplitMix64/Box-Muller generator, weight init order,
pre-norm block and patch embedding from their documented definitions with
numpy, then writes tests/golden/golden_values.hpp. Re-run after any
intentional change to those definitions:

    python3 tests/golden/gen_golden.py
"""

import math
import pathlib

import numpy as np

MASK = (1 << 64) - 1


class Prng:
    def __init__(self, seed):
        self.seed = seed
        self.counter = 0

    def next_u64(self):
        self.counter += 1
        z = (self.seed + self.counter * 0x9E3779B97F4A7C15) & MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def gaussian_pair(self):
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = (self.next_u64() >> 11) * 2.0**-53
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        return r * math.cos(theta), r * math.sin(theta)


def init_gaussian(shape, prng, std):
    n = int(np.prod(shape))
    out = np.zeros(n, dtype=np.float32)
    for i in range(0, n, 2):
        z0, z1 = prng.gaussian_pair()
        out[i] = np.float32(std * z0)
        if i + 1 < n:
            out[i + 1] = np.float32(std * z1)
    return out.reshape(shape).astype(np.float64)


def init_block(d, dff, prng):
    a = 1.0 / math.sqrt(d)
    o = 1.0 / math.sqrt(dff)
    return {
        "wq": init_gaussian((d, d), prng, a),
        "wk": init_gaussian((d, d), prng, a),
        "wv": init_gaussian((d, d), prng, a),
        "wo": init_gaussian((d, d), prng, a),
        "w1": init_gaussian((d, dff), prng, a),
        "w2": init_gaussian((dff, d), prng, o),
    }


def layer_norm(x):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def attention(q, k, v, heads):
    n, d = q.shape
    hd = d // heads
    out = np.zeros_like(q)
    for h in range(heads):
        s = slice(h * hd, (h + 1) * hd)
        scores = q[:, s] @ k[:, s].T / math.sqrt(hd)
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        out[:, s] = p @ v[:, s]
    return out


def gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def block(x, p, heads):
    h = layer_norm(x)
    a = attention(h @ p["wq"], h @ p["wk"], h @ p["wv"], heads)
    mid = x + a @ p["wo"]
    return mid + gelu(layer_norm(mid) @ p["w1"]) @ p["w2"]


def positional_encoding(grid, d):
    gd, gh, gw = grid
    m = (d + 2) // 3
    pe = np.zeros((gd * gh * gw, d))
    for z in range(gd):
        for y in range(gh):
            for x in range(gw):
                t = (z * gh + y) * gw + x
                pos = (z, y, x)
                for c in range(d):
                    j = c // 3
                    angle = pos[c % 3] / (10000.0 ** (2.0 * (j // 2) / m))
                    pe[t, c] = math.sin(angle) if j % 2 == 0 else math.cos(angle)
    return pe


def golden_block():
    prng = Prng(7)
    x = init_gaussian((4, 8), prng, 1.0)
    params = init_block(8, 32, prng)
    return block(x, params, 2)


def golden_encoder():
    D = H = W = 16
    p, d, dff, heads, layers, seed = 8, 16, 32, 2, 2, 11
    vol = np.zeros((D, H, W))
    for z in range(D):
        for y in range(H):
            for x in range(W):
                vol[z, y, x] = ((z * 7 + y * 3 + x * 5) % 17) / 16.0
    vol = vol.astype(np.float32).astype(np.float64)

    prng = Prng(seed)
    proj = init_gaussian((p**3, d), prng, 1.0 / math.sqrt(p**3))
    blocks = [init_block(d, dff, prng) for _ in range(layers)]

    g = (D // p, H // p, W // p)
    patches = np.zeros((g[0] * g[1] * g[2], p**3))
    for bz in range(g[0]):
        for by in range(g[1]):
            for bx in range(g[2]):
                t = (bz * g[1] + by) * g[2] + bx
                patches[t] = vol[bz * p:(bz + 1) * p, by * p:(by + 1) * p,
                                 bx * p:(bx + 1) * p].reshape(-1)
    x = patches @ proj + positional_encoding(g, d)
    for b in blocks:
        x = block(x, b, heads)
    return x


def emit(name, arr):
    vals = ", ".join(f"{v:.9g}F" for v in arr.reshape(-1))
    return f"inline constexpr float {name}[] = {{{vals}}};\n"


def main():
    out = pathlib.Path(__file__).with_name("golden_values.hpp")
    text = "#pragma once\n\n// Generated by gen_golden.py; do not edit.\n\n"
    text += "namespace golden {\n\n"
    text += "// Prng(7): x ~ N(0,1) [4x8], then BlockParams::init(8, 32, 2).\n"
    text += emit("kBlockOutput", golden_block())
    text += "\n// 16^3 volume ((7z+3y+5x) mod 17)/16, p=8, d=16, d_ff=32, 2 heads,\n"
    text += "// 2 layers, seed 11, all dense.\n"
    text += emit("kEncoderOutput", golden_encoder())
    text += "\n}  // namespace golden\n"
    out.write_text(text)


if __name__ == "__main__":
    main()
