"""Shared builders for graph, dataset-file, and candidate-matrix fixtures."""

import numpy as np
import pytest

from textkgc.contrastive import IN_BATCH, CandidateMatrix
from textkgc.encoder import EncoderParams
from textkgc.graph import Entity, KnowledgeGraph, Relation, Triple, add_inverse_triples
from textkgc.randomness import named_stream


def make_graph(train, valid=(), test=(), descriptions=None, names=None, augment=False):
    """Build a KnowledgeGraph from triple id-tuples, declaring ids on the fly."""
    descriptions = descriptions or {}
    names = names or {}
    ents, rels = set(), set()
    for split in (train, valid, test):
        for h, r, t in split:
            ents.update((h, t))
            rels.add(r)
    entities = [Entity(e, names.get(e, e), descriptions.get(e, "")) for e in sorted(ents)]
    relations = [Relation(r, descriptions.get(r, r)) for r in sorted(rels)]
    splits = {
        "train": [Triple(*x) for x in train],
        "valid": [Triple(*x) for x in valid],
        "test": [Triple(*x) for x in test],
    }
    g = KnowledgeGraph(entities, relations, splits)
    return add_inverse_triples(g) if augment else g


def write_dataset(dirpath, train, valid, test, entities, relations):
    """Write the five TSV files and return their paths in CLI flag order.

    ``entities``/``relations`` are (id, name, description) rows; a 2-tuple
    writes the short form without the description column.
    """
    paths = []
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        p = dirpath / f"{name}.tsv"
        p.write_text("".join("\t".join(row) + "\n" for row in rows), encoding="utf-8")
        paths.append(str(p))
    for name, rows in (("entities", entities), ("relations", relations)):
        p = dirpath / f"{name}.tsv"
        p.write_text("".join("\t".join(row) + "\n" for row in rows), encoding="utf-8")
        paths.append(str(p))
    return paths


def tiny_params(buckets=16, dim=8, seed=0, initial_temperature=0.05):
    return EncoderParams.initialize(buckets, dim, named_stream(seed, "init"), initial_temperature)


def plain_matrix(scores, provenance=None, mask=None, sn_column=None):
    """CandidateMatrix from a raw score array; defaults: all-IB, all unmasked."""
    scores = np.asarray(scores, dtype=float)
    B, C = scores.shape
    if provenance is None:
        provenance = np.array([IN_BATCH] * C)
    else:
        provenance = np.asarray(provenance)
    if mask is None:
        mask = np.ones((B, C), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    return CandidateMatrix(scores.copy(), mask.copy(), provenance, B, sn_column)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
