"""Seeded synthetic fixture datasets for scenarios and tests.

Generated at desk scale so the repo ships no data files. Sentiment rows
carry class-tilted word distributions (so trained models have signal);
author-pair rows pair perturbed mentions of one identity (positives)
against cross-identity mentions (negatives).
"""

from __future__ import annotations

import random
from typing import Optional

_POS_WORDS = "good great fine superb warm bright lively moving sharp rich".split()
_NEG_WORDS = "bad poor dull flat cold tired grim messy hollow weak".split()
_NEUTRAL_WORDS = "movie film plot actor scene story music sound score ending".split()

_FIRST = "jan mia lev ana kai sol ada tom eva rui noa ida gus lin ben ela".split()
_LAST = "smith jones garcia chen kumar novak okada silva braun rossi dubois tanaka".split()
_TITLE_WORDS = (
    "graph neural sparse latent robust scalable causal deep online federated "
    "inference retrieval parsing ranking clustering alignment estimation"
).split()
_VENUES = ["web conf", "data mining symposium", "learning systems workshop",
           "information retrieval forum", "language processing meeting"]


def make_sentiment_rows(n: int, seed: int, canary: Optional[str] = None) -> list[dict]:
    rng = random.Random(seed)
    rows = []
    for _ in range(n):
        label = rng.choice(("pos", "neg"))
        tilted = _POS_WORDS if label == "pos" else _NEG_WORDS
        words = [rng.choice(tilted) for _ in range(rng.randint(2, 5))]
        words += [rng.choice(_NEUTRAL_WORDS) for _ in range(rng.randint(1, 4))]
        rng.shuffle(words)
        text = " ".join(words)
        if canary:
            text = f"{text} {canary}"
        rows.append({"text": text, "label": label})
    return rows


def _identity(rng: random.Random) -> dict:
    first = rng.choice(_FIRST)
    last = rng.choice(_LAST)
    return {
        "name": f"{first} {last}",
        "coauthors": rng.sample([f"{f} {l}" for f, l in zip(_FIRST, _LAST)], 4),
        "topic": rng.sample(_TITLE_WORDS, 5),
        "venue": rng.choice(_VENUES),
        "year": rng.randint(1985, 2015),
    }


def _mention(rng: random.Random, ident: dict, canary: Optional[str]) -> dict:
    name = ident["name"]
    if rng.random() < 0.4:
        first, last = name.split(" ", 1)
        name = f"{first[0]} {last}"
    title = " ".join(rng.sample(ident["topic"], 3) + rng.sample(_TITLE_WORDS, 2))
    if canary:
        title = f"{title} {canary}"
    return {
        "name": name,
        "coauthors": rng.sample(ident["coauthors"], rng.randint(1, 3)),
        "title": title,
        "venue": ident["venue"] if rng.random() < 0.8 else rng.choice(_VENUES),
        "year": ident["year"] + rng.randint(-3, 3),
    }


def make_and_pair_rows(n: int, seed: int, canary: Optional[str] = None) -> list[dict]:
    rng = random.Random(seed)
    identities = [_identity(rng) for _ in range(12)]
    rows = []
    for _ in range(n):
        positive = rng.random() < 0.5
        if positive:
            ident = rng.choice(identities)
            a, b = _mention(rng, ident, canary), _mention(rng, ident, canary)
        else:
            ia, ib = rng.sample(range(len(identities)), 2)
            a = _mention(rng, identities[ia], canary)
            b = _mention(rng, identities[ib], canary)
        rows.append(
            {
                "name_a": a["name"],
                "name_b": b["name"],
                "coauthors_a": a["coauthors"],
                "coauthors_b": b["coauthors"],
                "title_a": a["title"],
                "title_b": b["title"],
                "venue_a": a["venue"],
                "venue_b": b["venue"],
                "year_a": a["year"],
                "year_b": b["year"],
                "same_author": "1" if positive else "0",
            }
        )
    return rows


def make_rows(schema_id: str, n: int, seed: int, canary: Optional[str] = None) -> list[dict]:
    if schema_id == "sentiment-v1":
        return make_sentiment_rows(n, seed, canary)
    if schema_id == "and-pairs-v1":
        return make_and_pair_rows(n, seed, canary)
    raise ValueError(f"no fixture generator for schema {schema_id}")
