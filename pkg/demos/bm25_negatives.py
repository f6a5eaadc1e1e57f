"""Hard negatives for the search split: BM25 over item descriptions, and how
they compare with random negatives for one query.

    python demos/bm25_negatives.py
"""
import numpy as np

from gensar.corpus import SynthConfig, generate_synthetic, split
from gensar.decode_eval import bm25_top_negatives, description_index
from gensar.identifier import tokenize_words

corpus = generate_synthetic(SynthConfig(n_users=50, n_items=500, n_queries=16, background_users=100, seed=3))
index = description_index([item.description for item in corpus.catalog])
row = next(r for r in split(corpus.histories).test if r.task == "search")
query = {q.query: q for q in corpus.queries}[row.query]
target = corpus.catalog[row.target]
words = tokenize_words(query.text)
print(f"query: {query.text!r}   clicked: {target.description!r}")

rng = np.random.default_rng(0)
hard = bm25_top_negatives(index, words, row.target, 99, rng)
easy = rng.choice([i for i in range(len(corpus.catalog)) if i != row.target], size=99, replace=False)
scores = index.scores(words)
print("\ntop BM25 negatives:")
for item in hard[:5]:
    print(f"  {scores[item]:6.3f}  {corpus.catalog[item].description}")



def same(items):
    return np.mean([corpus.catalog[i].cluster == target.cluster for i in items])


print(f"\nnegatives sharing the clicked item's cluster: BM25 {same(hard):.0%}, random {same(easy):.0%}")
print(f"mean BM25 score of negatives: BM25 {scores[hard].mean():.3f}, random {scores[easy].mean():.3f}")
