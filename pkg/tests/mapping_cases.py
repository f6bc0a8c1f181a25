"""Randomized entity-mapping fixtures with adversarial embedders, plus an oracle.

Every case is a small graph, one mention, an embedder that maps raw text
(not folded text) to hand-picked integer vectors, and a chat provider whose
selection reply is drawn from the candidates it was shown, NONE, or junk.
"""

import hashlib
import random
import re
from dataclasses import dataclass, field

from oracles import brute_ranking

TAU = 0.85
DIM = 6
KINDS = ("exact", "exact-misleading", "boundary", "above", "random")


def oracle_fold(s):
    return " ".join(s.casefold().split())


class TableEmbedder:
    """Raw-text lookup, so a name variant can be steered to any vector."""

    provider_id = "table"

    def __init__(self, table):
        self.table = dict(table)
        self.model_id = "table-" + hashlib.sha256(repr(sorted(self.table.items())).encode()).hexdigest()[:10]

    def embed(self, texts):
        return [self.table[t] for t in texts]


class SelectingChat:
    """Answers ``select`` prompts with a listed candidate, NONE, or junk, per a seed."""

    provider_id = "selecting"

    def __init__(self, seed):
        self.seed = seed
        self.model_id = f"sel-{seed}"
        self.requests = []

    def complete(self, request):
        self.requests.append(request)
        names = re.findall(r"^- (.+)$", request.prompt, flags=re.M)
        h = int(hashlib.sha256(f"{self.seed}/{request.prompt}".encode()).hexdigest(), 16)
        pick = h % 4
        if pick == 0 or not names:
            return "NONE"
        if pick == 1:
            return "something that is not listed"
        return names[h // 4 % len(names)].upper()


@dataclass
class MappingCase:
    names: list
    vectors: list
    surface: str
    query: list
    kind: str
    seed: int
    table: dict = field(default_factory=dict)


def _rand_vec(rng, first_max=5):
    while True:
        v = [rng.randint(-5, 5) for _ in range(DIM)]
        v[0] = rng.randint(-5, first_max)
        if any(v):
            return v


def make_case(seed):
    rng = random.Random(seed)
    n = rng.randint(2, 12)
    names = [f"term {i} {rng.choice(['alpha', 'beta', 'gamma'])}" for i in range(n)]
    if rng.random() < 0.3:
        names[-1] = names[0].upper()  # duplicate folded name with a larger id
    kind = rng.choice(KINDS)
    e1 = [1] + [0] * (DIM - 1)
    if kind in ("boundary", "above"):
        # every other node has cosine <= 0 against e1
        vectors = [_rand_vec(rng, first_max=0) for _ in names]
        target = rng.randrange(n)
        vectors[target] = [17, 7, 6, 5, 1, 0] if kind == "boundary" else [17, 7, 6, 5, 0, 0]
        surface, query = f"mystery {seed}", e1
    else:
        vectors = [_rand_vec(rng) for _ in names]
        if kind.startswith("exact"):
            base = rng.choice(names)
            surface = rng.choice([base, base.upper(), f"  {base.title()} ", base.replace(" ", "  ")])
            # misleading: the variant embeds right onto some other node
            query = vectors[rng.randrange(n)] if kind == "exact-misleading" else _rand_vec(rng)
        else:
            surface, query = f"mystery {seed}", _rand_vec(rng)
    table = {name: vec for name, vec in zip(names, vectors)}
    table[surface] = query
    return MappingCase(names, vectors, surface, query, kind, seed, table)


def expected_outcome(case, k=10, tau=TAU):
    """('exact', node) | ('similarity', node) | ('llm', candidate ids)."""
    key = oracle_fold(case.surface)
    same = [i for i, nm in enumerate(case.names) if oracle_fold(nm) == key]
    if same:
        return "exact", min(same)
    ranking = brute_ranking(list(range(len(case.names))), case.vectors, case.query)[:k]
    top_id, top_score = ranking[0]
    if top_score > tau:
        return "similarity", top_id
    return "llm", [i for i, _ in ranking]
