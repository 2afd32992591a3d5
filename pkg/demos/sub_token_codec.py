"""
Sub-tokens, valid sets and the carry-over decoder
=================================================

A token from C classes is written as l digits in base b. Masking digits one
at a time gives "intermediate" tokens that are only partly known.
"""

import numpy as np

from primemdm import make_codec, encode
from primemdm.codec import intermediate_state_count
from primemdm.decoder import build_filter_table, filtered_softmax, marginal, valid_set

# seven classes with three binary digits; the code 111 is never used
codec = make_codec(7, 3)
print("base", codec.base, "mask value", codec.mask_value)
for x in range(7):
    print(x, "->", encode(codec, x))

# how many partly-masked states does each setting add?
for l in (1, 2, 4, 8):
    print(f"C=256 l={l}: {intermediate_state_count(make_codec(256, l))} intermediate states")

# the filter table turns each visible digit into a bitset over codes;
# the codes still possible for a token are the AND over its digits
ft = build_filter_table(codec)
m = codec.mask_value
for y in ([m, m, m], [0, m, m], [0, 0, m], [1, m, 0]):
    ok = np.flatnonzero(valid_set(ft, np.array(y)))
    print(y, "->", [encode(codec, int(x)) for x in ok])

# a softmax restricted to the valid set reproduces the visible digits exactly
rng = np.random.default_rng(0)
y = np.array([1, m, 0])
d = filtered_softmax(rng.normal(size=7), valid_set(ft, y))
for j in range(3):
    print(f"digit {j}: marginal {np.round(marginal(d, codec, j), 6)}")
