"""Seed-derivation helpers.

Every random draw in the package flows from one root seed through a named
substream, so components stay reproducible independently of each other.
"""

import numpy as np

SYNTH = 0x53594E54
INIT = 0x494E4954
SHUFFLE = 0x53485546
AUGMENT = 0x4155474D
ANNOT = 0x414E4E4F

_MASK64 = (1 << 64) - 1


def substream_seq(root_seed, *tags):
    """SeedSequence for (root_seed, *tags); negative roots are wrapped to u64."""
    return np.random.SeedSequence([int(root_seed) & _MASK64, *[int(t) & _MASK64 for t in tags]])


def substream(root_seed, *tags):
    """Independent PCG64 generator for the named substream."""
    return np.random.Generator(np.random.PCG64(substream_seq(root_seed, *tags)))


def substream_seed(root_seed, *tags):
    """Single integer seed derived from the named substream."""
    return int(substream_seq(root_seed, *tags).generate_state(1, np.uint64)[0])
