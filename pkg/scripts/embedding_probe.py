"""Train row embeddings on a catalog and list each value's nearest neighbours.

    python scripts/embedding_probe.py --seed 0 --top 5
    python scripts/embedding_probe.py --value-skew 1.0 --token title.genre=1
"""
import argparse

import numpy as np

from neolite.rvec import SgnsParams, build_sentences, train_embeddings
from neolite.simdb import generate_catalog, imdb_like_schema


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--value-skew", type=float, default=1.0)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--top", type=int, default=5)
    ap.add_argument("--token", action="append", help="tokens to probe (default: a few title values)")
    args = ap.parse_args()
    cat = generate_catalog(imdb_like_schema(value_skew=args.value_skew), args.seed)
    model = train_embeddings(build_sentences(cat, denormalize=True), SgnsParams(epochs=args.epochs, seed=args.seed))
    unit = model.vectors / np.maximum(np.linalg.norm(model.vectors, axis=1, keepdims=True), 1e-12)
    probes = args.token or [t for t in model.tokens if t.startswith("title.genre=")][:3]
    for tok in probes:
        sims = unit @ unit[model.vocab[tok]]
        order = [i for i in np.argsort(-sims) if model.tokens[i] != tok][:args.top]
        print(tok + ": " + ", ".join(f"{model.tokens[i]} ({sims[i]:.2f})" for i in order))


if __name__ == "__main__":
    main()
