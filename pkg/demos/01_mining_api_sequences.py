# %% [markdown]
# # Mining API call sequences from a small C library
#
# We scan the `miniplist` fixture, build its type-compatibility graph and mine
# sequences along three dimensions: usage examples (UE), model-pre-sampling
# paths over the graph (MP) and semantic chains (SEM). The stub oracle stands in
# for a language model, so everything here runs offline and deterministically.

# %%
from pathlib import Path

from masfuzz.metainfo import scan_library
from masfuzz.oracles import StubOracle
from masfuzz.semantics import mine_semantic_sequences
from masfuzz.sequences import (MinerConfig, SequencePool, build_compat_graph,
                               mine_mp_sequences, mine_usage_sequences)

ROOT = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "miniplist"
model = scan_library(ROOT)
print(len(model.apis), "public functions")
for api in model.apis:
    print(" ", api.return_type, api.name, [p.type for p in api.params])

# %% [markdown]
# An edge `a -> b` means the value returned by `a` can feed a parameter of `b`.

# %%
graph = build_compat_graph(model)
for a, b in sorted(graph.edges):
    print(f"{a:>16} -> {b}")

# %%
cfg = MinerConfig(rng_seed=0)
ue = mine_usage_sequences(model)
mp = mine_mp_sequences(graph, cfg)
sem, relations, _ = mine_semantic_sequences(model, StubOracle(), cfg)
pool = SequencePool([*ue, *mp, *sem])
for dim, row in pool.stats().items():
    print(dim, row)

# %% [markdown]
# The longest sequence in each dimension is what the synthesizer reaches for first.

# %%
for dim, group in (("UE", ue), ("MP", mp), ("SEM", sem)):
    if group:
        best = max(group, key=lambda s: len(s.apis))
        print(f"{dim:>3}: {' -> '.join(best.apis)}")
