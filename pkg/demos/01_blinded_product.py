"""Blind a matrix product, let an untrusted party multiply, unblind.

The owner of A and B never shows them in the clear: both are scaled by
coefficient ratios and shuffled by permutations before leaving the
process.  Whoever multiplies the blinded pair computes the right answer
without learning the operands, and the decoded product matches plain
numpy to float precision.
"""
import numpy as np

from blindtrain.obfuscate import (
    KeySpaceConfig,
    dec_only,
    enc_pair,
    encryption_matrix,
    inverse_encryption_matrix,
    kgen,
)
from blindtrain.tensor import make_rng

rng = make_rng(0)
m, n, p = 4, 5, 3
a = rng.standard_normal((m, n))
b = rng.standard_normal((n, p))

sk = kgen(m, n, p, KeySpaceConfig(255), rng)
a_enc, b_enc = enc_pair(sk, a, b)

print("plain A, first row:    ", np.round(a[0], 3))
print("blinded A, first row:  ", np.round(a_enc[0], 3))
print("entries moved and rescaled; nothing lines up positionally\n")

# the untrusted side sees only blinded operands
c_enc = a_enc @ b_enc

c = dec_only(sk, c_enc)
print("max |decoded - A@B| =", f"{np.max(np.abs(c - a @ b)):.3e}")

# the same blinding, written as invertible matrices: A' = E1 A E2^-1
e1 = encryption_matrix(sk.slots[0])
e2_inv = inverse_encryption_matrix(sk.slots[1])
print("max |A' - E1 A E2^-1| =", f"{np.max(np.abs(a_enc - e1 @ a @ e2_inv)):.3e}")

# blinding is not free secrecy for the *product* structure: the decoded
# entry grid is exact, so correctness and secrecy live on different axes
print("\ndecoded product:")
print(np.round(c, 4))
print("plain product:")
print(np.round(a @ b, 4))
