"""Named random streams fanned out from one master seed.

Each mechanism (init, freeze, dropout, main-head, data-order, noise) draws from
its own generator so that toggling one mechanism never shifts another's draws.
"""
import zlib

import numpy as np
import torch

STREAMS = ("init", "freeze", "dropout", "main-head", "data-order", "noise")


def derive_seed(master, *names):
    words = [int(master) & 0xFFFFFFFF, (int(master) >> 32) & 0xFFFFFFFF]
    words += [zlib.crc32(str(n).encode()) for n in names]
    hi, lo = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return (int(hi) << 31) ^ int(lo)


def make_generator(master, *names):
    g = torch.Generator()
    g.manual_seed(derive_seed(master, *names))
    return g


def make_streams(master, names=STREAMS):
    return {name: make_generator(master, name) for name in names}
