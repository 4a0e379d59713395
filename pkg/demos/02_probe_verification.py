"""How many probe rounds does it take to catch a cheating multiplier?

Each verification round checks the returned product against the retained
operands along one random binary vector.  A single corrupted entry hides
from one round with probability 1/2, so k rounds catch it with
probability 1 - 2^-k.  The table below measures that empirically, then
prints the round count needed for a whole-run error budget.
"""
import numpy as np

from blindtrain.obfuscate import (
    IntegrityConfig,
    IntegrityFailure,
    KeySpaceConfig,
    dec,
    enc_pair,
    kgen,
    min_rounds,
)
from blindtrain.tensor import make_rng

keyspace = KeySpaceConfig(255)
trials = 400
rng = make_rng(1)

print("k   detected/trials   rate     1-2^-k")
for k in (1, 2, 4, 6, 10):
    caught = 0
    for _ in range(trials):
        m, n, p = (int(v) for v in rng.integers(2, 9, size=3))
        a = rng.standard_normal((m, n))
        b = rng.standard_normal((n, p))
        sk = kgen(m, n, p, keyspace, rng)
        a_enc, b_enc = enc_pair(sk, a, b)
        c_enc = a_enc @ b_enc
        c_enc[int(rng.integers(m)), int(rng.integers(p))] += 1.0  # one bad entry
        try:
            dec(sk, c_enc, a, b, k, rng)
        except IntegrityFailure:
            caught += 1
    print(f"{k:<3} {caught:>5}/{trials}        {caught / trials:.4f}   {1 - 0.5 ** k:.4f}")

# honest results never trip a probe: the threshold scales with operand
# magnitudes, so float rounding stays under it
honest_failures = 0
for _ in range(2000):
    m, n, p = (int(v) for v in rng.integers(2, 9, size=3))
    a = rng.standard_normal((m, n))
    b = rng.standard_normal((n, p))
    sk = kgen(m, n, p, keyspace, rng)
    a_enc, b_enc = enc_pair(sk, a, b)
    try:
        dec(sk, a_enc @ b_enc, a, b, 5, rng)
    except IntegrityFailure:
        honest_failures += 1
print(f"\nhonest false positives: {honest_failures}/2000")

# picking k for a run: allow at most a 1% chance that any product of an
# inference pass over 10 layers slips through unverified
cfg = IntegrityConfig(t=0.01, task="inference", n_workers=1, n_layers=10)
print("rounds for 1% budget, 1 worker, 10 layers, inference:", min_rounds(cfg))

cfg = IntegrityConfig(t=0.01, task="training", n_epochs=5, dataset_size=200,
                      batch_size=32, n_workers=2, n_layers=3)
print("same budget across a 5-epoch training run:          ", min_rounds(cfg))
