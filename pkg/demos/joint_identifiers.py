"""Train the joint quantizer on a small synthetic catalog and look at what
it produces: shared prefixes, the two identifier flavours, behavior-token
renderings and collision rates against single-source quantizers.

    python demos/joint_identifiers.py
"""
from collections import Counter

from gensar.corpus import SynthConfig, generate_synthetic
from gensar.identifier import Behavior, behavior_identifier, collision_rate
from gensar.rqvae import RqvaeConfig, codebook_utilization, export_identifiers, train, train_single

corpus = generate_synthetic(SynthConfig(n_users=100, n_items=600, n_queries=16, background_users=400, seed=7))
cfg = RqvaeConfig(semantic_dim=32, collab_dim=32, latent_dim=16, codebook_size=32, epochs=60, batch_size=32, lr=3e-3, final_lr=1e-4, seed=7)

result = train(cfg, corpus.semantic, corpus.collab)
first, last = result.history[0], result.history[-1]
print(f"reconstruction {first['recon']:.3f} -> {last['recon']:.3f} over {cfg.epochs} epochs")

idents = export_identifiers(result.model, corpus.item_ids, corpus.semantic, corpus.collab)
for ident in idents[:3]:
    item = corpus.catalog[ident.item_id]
    print(f"\n{item.description}")
    print("  search click:", " ".join(behavior_identifier(Behavior.SEARCH_ITEM, ident)))
    print("  rec click:   ", " ".join(behavior_identifier(Behavior.REC_ITEM, ident)))

# items of one cluster should concentrate on a few shared prefixes
by_cluster = Counter((corpus.catalog[i.item_id].cluster, i.shared[0]) for i in idents)
for c in range(3):
    top = sorted(((n, code) for (cl, code), n in by_cluster.items() if cl == c), reverse=True)[:3]
    print(f"cluster {c}: most common first shared codes {[code for _, code in top]}")

util = codebook_utilization(result.model, corpus.semantic, corpus.collab)
print("\ncodebook utilization:", {k: [round(u, 2) for u in v] for k, v in util.items()})

print("\ncollision rates")
print(f"  joint semantic identifiers  {collision_rate([i.semantic_codes for i in idents]):.4f}")
print(f"  joint collab identifiers    {collision_rate([i.collab_codes for i in idents]):.4f}")
for name, v in (("semantic-only", corpus.semantic), ("collab-only", corpus.collab)):
    single = train_single(cfg, v).model
    print(f"  {name:<27} {collision_rate([tuple(c) for c in single.codes(v)]):.4f}")
print("\nAt this reduced scale the ordering can go either way; tests/test_acceptance.py")
print("compares the quantizers on the default 2,000-item corpus over three seeds.")
