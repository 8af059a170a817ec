"""Seeded random streams that can be reproduced outside of numpy.

Every stream is a PCG64 (XSL-RR 128/64) generator whose 128-bit state and
128-bit increment are filled from four consecutive SplitMix64 outputs of the
user seed::

    s0, s1, s2, s3 = splitmix64 stream of `seed`
    state = (s0 << 64) | s1
    inc   = ((s2 << 64) | s3) | 1

Uniform doubles are ``(raw >> 11) * 2**-53`` (numpy's own conversion for
``Generator.random``). Gaussian pairs come from Box-Muller applied to two
consecutive raw draws ``a, b``::

    u1 = ((a >> 11) + 1) * 2**-53        # in (0, 1]
    u2 = (b >> 11) * 2**-53              # in [0, 1)
    z0 = sqrt(-2 ln u1) cos(2 pi u2)
    z1 = sqrt(-2 ln u1) sin(2 pi u2)
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x):
    """One SplitMix64 step; returns ``(new_state, output)``."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def derive_seed(seed, *stream):
    """Hash a seed and a path of stream ids into a fresh 64-bit seed.

    Used to partition the seed space, e.g. ``derive_seed(master, 1, i)`` is
    the seed of sample ``i`` of the training split.
    """
    state = int(seed) & _MASK64
    state, out = splitmix64(state)
    for s in stream:
        state, out = splitmix64((out ^ (int(s) & _MASK64)) & _MASK64)
    return out


def generator(seed):
    """Return a ``numpy.random.Generator`` seeded as documented above."""
    state = int(seed) & _MASK64
    words = []
    for _ in range(4):
        state, out = splitmix64(state)
        words.append(out)
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": (words[0] << 64) | words[1],
            "inc": ((words[2] << 64) | words[3]) | 1,
        },
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bitgen)


def uniform(gen, size=None):
    """Uniform doubles in [0, 1) from the raw 64-bit stream."""
    raw = gen.bit_generator.random_raw(1 if size is None else size)
    u = (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return float(u[0]) if size is None else u


def box_muller(gen, n):
    """Return two arrays of ``n`` independent standard normals each."""
    raw = gen.bit_generator.random_raw(2 * n).reshape(n, 2)
    u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
    u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    return rad * np.cos(ang), rad * np.sin(ang)
