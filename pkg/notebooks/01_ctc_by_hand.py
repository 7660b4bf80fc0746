"""
CTC by hand
===========

The CTC loss sums the probability of every frame-level path that collapses
to the target. For tiny inputs we can list those paths and check the
dynamic-programming answer against the brute-force one.
"""

import itertools
import math

import numpy as np

from lipread.ctc import CtcPrefixScorer, collapse, ctc_loss

rng = np.random.default_rng(0)

# three frames, a blank plus two labels
T, V = 3, 3
probs = rng.dirichlet(np.ones(V), size=T)
logprobs = np.log(probs)
print("frame posteriors:\n", probs.round(3))

# every path and what it collapses to
mass = {}
for path in itertools.product(range(V), repeat=T):
    y = tuple(collapse(path))
    mass[y] = mass.get(y, 0.0) + math.prod(probs[t, k] for t, k in enumerate(path))

for y, p in sorted(mass.items(), key=lambda kv: -kv[1]):
    dp = math.exp(-ctc_loss(logprobs, list(y)).loss)
    print(f"y={list(y)!s:10} brute={p:.6f} dp={dp:.6f}")

# all outputs together carry the full probability mass
print("total:", sum(mass.values()))

# %%
# The prefix scorer used during beam search gives the probability that the
# output *starts with* a prefix. Extending a prefix never increases it.
scorer = CtcPrefixScorer(logprobs)
state = scorer.initial_state()
for token in (1, 2):
    _, state = scorer.step(state, state.prefix, token)
    print(f"prefix {list(state.prefix)}: log psi = {state.score:.4f}")
print("full-sequence log p([1, 2]):", round(scorer.final_score(state), 4),
      "vs", round(-ctc_loss(logprobs, [1, 2]).loss, 4))
