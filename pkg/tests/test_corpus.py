from collections import Counter

import numpy as np
import pytest

from gensar import corpus as cp
from gensar.identifier import Behavior, ItemIdentifier, TokenVocabulary

R, Q, S = Behavior.REC_ITEM, Behavior.SEARCH_QUERY, Behavior.SEARCH_ITEM


@pytest.fixture(scope="module")
def small_corpus():
    return cp.generate_synthetic(cp.SynthConfig(n_users=120, n_items=300, n_queries=16, background_users=200, seed=3))


def toy_world():
    """Three items, two queries, two users with hand-written histories."""
    identifiers = {
        0: ItemIdentifier(0, (247, 197), (184, 110), (5, 6)),
        1: ItemIdentifier(1, (10, 25), (7, 8), (52, 37)),
        2: ItemIdentifier(2, (3, 4), (1, 2), (9, 9)),
    }
    queries = {0: cp.Query(0, "Piano", 0), 1: cp.Query(1, "Artificial Intelligence", 1)}
    catalog = [cp.CatalogItem(i, f"cluster-0 item {i} piano", 0) for i in range(3)]

    def ev(*pairs):
        return [cp.Interaction(b, x, t) for t, (b, x) in enumerate(pairs)]

    histories = [
        cp.UserHistory(0, ev((Q, 0), (S, 0), (R, 1), (R, 2), (Q, 1), (S, 2), (R, 0), (Q, 0), (S, 1))),
        cp.UserHistory(1, ev((R, 0), (R, 1), (R, 2))),
    ]
    return identifiers, queries, catalog, histories


def test_generator_is_seed_deterministic():
    cfg = cp.SynthConfig(n_users=30, n_items=120, n_queries=8, background_users=50, seed=9)
    a, b = cp.generate_synthetic(cfg), cp.generate_synthetic(cfg)
    assert a.catalog == b.catalog and a.queries == b.queries and a.histories == b.histories
    assert a.semantic.tobytes() == b.semantic.tobytes() and a.collab.tobytes() == b.collab.tobytes()


def test_generator_shapes(small_corpus):
    c = small_corpus
    assert len(c.catalog) == 300 and len(c.queries) == 16 and len(c.histories) == 120
    assert c.semantic.shape == (300, 32) and c.collab.shape == (300, 32)
    assert np.isfinite(c.semantic).all() and np.isfinite(c.collab).all()
    assert all(d.description.startswith(f"cluster-{d.cluster} item {d.item} ") for d in c.catalog)


def test_search_click_stays_in_query_cluster(small_corpus):
    clusters = {it.item: it.cluster for it in small_corpus.catalog}
    qclusters = {q.query: q.cluster for q in small_corpus.queries}
    n = 0
    for h in small_corpus.histories:
        for prev, x in zip(h.interactions, h.interactions[1:]):
            if x.behavior is S:
                assert prev.behavior is Q
                assert clusters[x.payload] == qclusters[prev.payload]
                n += 1
    assert n > 0


def test_users_never_repeat_an_item(small_corpus):
    for h in small_corpus.histories:
        items = [x.payload for x in h.interactions if x.behavior.is_item]
        assert len(items) == len(set(items))


def test_recommendation_clusters_follow_planted_preferences(small_corpus):
    """Per-cluster counts of recommendation clicks against the multinomial
    expectation from each user's mixture, within three standard deviations."""
    c = small_corpus
    clusters = {it.item: it.cluster for it in c.catalog}
    k = c.preferences.shape[1]
    observed, expected, variance = np.zeros(k), np.zeros(k), np.zeros(k)
    for h in c.histories:
        p = c.preferences[h.user]
        for x in h.interactions:
            if x.behavior is R:
                observed[clusters[x.payload]] += 1
                expected += p
                variance += p * (1 - p)
    assert np.all(np.abs(observed - expected) <= 3 * np.sqrt(variance)), (observed, expected)


def test_history_validation():
    with pytest.raises(ValueError):
        cp.UserHistory(0, [cp.Interaction(R, 1, 2), cp.Interaction(R, 2, 2)])
    with pytest.raises(ValueError):
        cp.UserHistory(0, [cp.Interaction(R, 1, 0), cp.Interaction(S, 2, 1)])


def test_three_recommendation_clicks_split_one_each():
    _, _, _, histories = toy_world()
    sp = cp.split(histories)
    rec_valid = [r for r in sp.valid if r.user == 1]
    rec_test = [r for r in sp.test if r.user == 1]
    assert [r.position for r in rec_valid] == [1] and [r.position for r in rec_test] == [2]
    assert sp.cutoff[1] == 1  # one training target, position 0


def test_user_without_search_has_no_search_rows():
    _, _, _, histories = toy_world()
    sp = cp.split(histories)
    assert not [r for r in sp.valid + sp.test if r.user == 1 and r.task == "search"]
    assert 1 in sp.excluded["search"]


def test_split_rows_carry_query_and_cutoff():
    _, _, _, histories = toy_world()
    sp = cp.split(histories)
    (test_search,) = [r for r in sp.test if r.user == 0 and r.task == "search"]
    assert (test_search.position, test_search.target, test_search.query) == (8, 1, 0)
    # recommendation clicks sit at positions 2, 3 and 6
    (valid_rec,) = [r for r in sp.valid if r.user == 0 and r.task == "recommendation"]
    assert valid_rec.position == 3
    # training stops at the earliest held-out target
    assert sp.cutoff[0] == 3


def test_splits_are_disjoint(small_corpus):
    sp = cp.split(small_corpus.histories)
    train = set()
    for h in small_corpus.histories:
        for p in range(sp.cutoff[h.user]):
            x = h.interactions[p]
            if x.behavior.is_item:
                train.add((h.user, p))
    valid = {(r.user, r.position) for r in sp.valid}
    test = {(r.user, r.position) for r in sp.test}
    assert not (train & valid) and not (train & test) and not (valid & test)
    by_user = {h.user: h for h in small_corpus.histories}
    for r in sp.valid + sp.test:
        x = by_user[r.user].interactions[r.position]
        assert x.payload == r.target
        assert x.behavior is (R if r.task == "recommendation" else S)
    # the held-out rows come after every training target
    for r in sp.valid + sp.test:
        assert r.position >= sp.cutoff[r.user]


def test_nrip_sample_shape():
    identifiers, queries, _, histories = toy_world()
    ins = cp.rec_instruction(histories[0], 2, identifiers, queries)
    assert " ".join(ins) == (
        "<S_Q> piano <S_I> <M1_247> <M2_197> <S1_184> <S2_110> " + " ".join(cp.PROMPTS["nrip"])
    )
    resp = cp.target_tokens(R, 1, identifiers, queries)
    assert " ".join(resp) == "<R_I> <M1_10> <M2_25> <R1_52> <R2_37>"


def test_nsip_instruction_ends_with_current_query():
    identifiers, queries, _, histories = toy_world()
    ins = cp.search_instruction(histories[0], 5, identifiers, queries)
    tail = ["<S_Q>", "artificial", "intelligence"] + cp.PROMPTS["nsip"]
    assert ins[-len(tail):] == tail
    # the query is not repeated inside the rendered history
    assert ins.count("<S_Q>") == 2


def test_history_rendering_keeps_order_and_truncates_oldest():
    identifiers, queries, _, histories = toy_world()
    events = histories[0].interactions
    full = cp.render_history(events, identifiers, queries)
    assert [t for t in full if t in ("<R_I>", "<S_Q>", "<S_I>")] == [x.behavior.token for x in events]
    short = cp.render_history(events, identifiers, queries, max_history=2)
    assert short == cp.render_history(events[-2:], identifiers, queries)


def test_task_count_identity():
    identifiers, queries, catalog, histories = toy_world()
    sp = cp.split(histories)
    examples = cp.build_instructions(histories, sp, identifiers, catalog, queries)
    expected = Counter()
    for h in histories:
        for p in range(sp.cutoff[h.user]):
            expected[{R: "nrip", Q: "nsqp", S: "nsip"}[h.interactions[p].behavior]] += 1
    expected["desc2id"] = expected["id2desc"] = 2 * len(catalog)
    assert Counter(ex.task for ex in examples) == expected
    assert len(examples) == sum(expected.values())


def test_task_filter_removes_search_item_targets(small_corpus):
    c = small_corpus
    from gensar.rqvae import RqvaeConfig, export_identifiers, train

    cfg = RqvaeConfig(semantic_dim=32, collab_dim=32, codebook_size=8, epochs=1, batch_size=100)
    idents = {i.item_id: i for i in export_identifiers(train(cfg, c.semantic, c.collab).model, c.item_ids, c.semantic, c.collab)}
    queries = {q.query: q for q in c.queries}
    sp = cp.split(c.histories)
    tasks = [t for t in cp.TASKS if t != "nsip"]
    examples = cp.build_instructions(c.histories, sp, idents, c.catalog, queries, tasks)
    assert not [ex for ex in examples if ex.response and ex.response[0] == "<S_I>"]
    assert [ex for ex in examples if ex.response and ex.response[0] == "<R_I>"]
    vocab = TokenVocabulary.build(2, 2, 8, cp.corpus_words(c.catalog, c.queries))
    for ex in examples:
        vocab.encode(ex.instruction)  # strict: every token, code tokens included, is known
        vocab.encode(ex.response)


def test_alignment_examples_cover_both_identifier_kinds():
    identifiers, _, catalog, _ = toy_world()
    ex = cp.alignment_examples(catalog, identifiers)
    assert len(ex) == 4 * len(catalog)
    first = [e for e in ex if e.item == 0]
    assert {tuple(e.response) for e in first if e.task == "desc2id"} == {
        tuple(identifiers[0].semantic_tokens), tuple(identifiers[0].collab_tokens)
    }
    assert all(e.response == cp.tokenize_words(catalog[0].description) for e in first if e.task == "id2desc")


def test_unknown_task_rejected():
    identifiers, queries, catalog, histories = toy_world()
    with pytest.raises(ValueError):
        cp.build_instructions(histories, cp.split(histories), identifiers, catalog, queries, ["nrip", "bogus"])


def test_behavior_tokens_can_be_removed_everywhere():
    identifiers, queries, catalog, histories = toy_world()
    sp = cp.split(histories)
    examples = cp.build_instructions(histories, sp, identifiers, catalog, queries, with_behavior=False)
    for ex in examples:
        assert not {"<R_I>", "<S_Q>", "<S_I>"} & set(ex.instruction + ex.response)


def test_file_round_trips(tmp_path, small_corpus):
    c = small_corpus
    cp.write_histories(tmp_path / "h.jsonl", c.histories)
    cp.write_catalog(tmp_path / "c.jsonl", c.catalog)
    cp.write_queries(tmp_path / "q.jsonl", c.queries)
    assert cp.read_histories(tmp_path / "h.jsonl") == c.histories
    assert cp.read_catalog(tmp_path / "c.jsonl") == c.catalog
    assert cp.read_queries(tmp_path / "q.jsonl") == c.queries


def test_config_invariants():
    from gensar.errors import ConfigError

    with pytest.raises(ConfigError):
        cp.SynthConfig(n_clusters=10, n_queries=5)
    with pytest.raises(ConfigError):
        cp.SynthConfig(history_length=2)
    with pytest.raises(ConfigError):
        cp.SynthConfig(collab_rank=33)


def test_noise_free_collaborative_vectors_have_the_factor_rank():
    cfg = cp.SynthConfig(n_users=60, n_items=200, n_queries=8, background_users=100, collab_rank=5, collab_noise=0.0, seed=4)
    collab = cp.generate_synthetic(cfg).collab.astype(np.float64)
    s = np.linalg.svd(collab, compute_uv=False)
    assert collab.shape == (200, 32)
    assert s[4] > 1e-3 * s[0] and np.all(s[5:] < 1e-5 * s[0])
