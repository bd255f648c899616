import math
from bisect import bisect_right

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from services.core_model import ActivityType
from services.errors import TopicModelError
from services.lda import (
    GAP,
    VOCABULARY,
    ActivityDocument,
    TopicModel,
    assign_groups,
    document_groups,
    gibbs_fit,
    hellinger,
    hyperparameter_sweep,
    resolve_prior,
    tokenize_chains,
    topic_distance_matrix,
    umass_coherence,
)

V = len(VOCABULARY)


def _doc(i, words, user_id=None):
    return ActivityDocument(user_id or f"u{i:03d}", None, tuple(words))


@pytest.fixture
def small_corpus():
    rng = np.random.default_rng(1)
    groups = [("Home", "Gap"), ("Work", "Transport"), ("Shopping", "DrinkEat", "LeisureSport")]
    return [_doc(i, [groups[i % 3][j] for j in rng.integers(len(groups[i % 3]), size=12)]) for i in range(9)]


# ---------------------------
# Documents
# ---------------------------
def test_all_home_day(make_stay, make_chain, at, monday):
    chain = make_chain([make_stay(at(monday, 0), at(monday, 23, 59), activity=ActivityType.HOME)])
    (doc,) = tokenize_chains([chain])
    assert doc.tokens == ("Home",) * 32
    assert doc.key == "u1/2014-01-06"


def test_office_day_with_gaps(make_stay, make_chain, at, monday):
    chain = make_chain([make_stay(at(monday, 9), at(monday, 17), activity=ActivityType.WORK)])
    (doc,) = tokenize_chains([chain])
    assert doc.tokens == (GAP,) * 6 + ("Work",) * 16 + (GAP,) * 10


def test_slot_goes_to_longest_cover(make_stay, make_chain, at, monday):
    stays = [
        make_stay(at(monday, 0), at(monday, 12, 20), activity=ActivityType.HOME),
        make_stay(at(monday, 12, 20), at(monday, 23), place_id=1, activity=ActivityType.DRINK_EAT),
    ]
    (doc,) = tokenize_chains([make_chain(stays)])
    assert doc.tokens[12] == "Home"  # 12:00-12:30
    assert doc.tokens[13] == "DrinkEat"


def test_gappy_days_are_dropped(make_stay, make_chain, at, monday):
    empty = make_chain([])
    short = make_chain([make_stay(at(monday, 9), at(monday, 12), activity=ActivityType.WORK)])
    assert tokenize_chains([empty, short]) == []


def test_user_documents_join_days(make_stay, make_chain, at, monday):
    tuesday = monday.replace(day=7)
    chains = [
        make_chain([make_stay(at(d, 0), at(d, 23, 59), activity=ActivityType.HOME)], day=d) for d in (tuesday, monday)
    ]
    (doc,) = tokenize_chains(chains, unit="user")
    assert doc.day is None and doc.key == "u1"
    assert len(doc.tokens) == 64
    with pytest.raises(TopicModelError):
        tokenize_chains(chains, unit="week")


# ---------------------------
# Priors
# ---------------------------
def test_resolve_prior():
    assert resolve_prior("symmetric", 4, 4) == pytest.approx([0.25] * 4)
    asym = resolve_prior("asymmetric", 4, 4)
    assert asym.sum() == pytest.approx(1.0)
    assert all(asym[:-1] > asym[1:])
    assert resolve_prior(0.05, 3, 2).tolist() == [0.05] * 3
    for bad in ("flat", [0.1, 0.2], -1.0, 0.0):
        with pytest.raises(TopicModelError):
            resolve_prior(bad, 3, 3)


# ---------------------------
# Sampler
# ---------------------------
def test_fit_rejects_bad_arguments(small_corpus):
    with pytest.raises(TopicModelError):
        gibbs_fit([], 2)
    with pytest.raises(TopicModelError):
        gibbs_fit(small_corpus, 0)
    with pytest.raises(TopicModelError):
        gibbs_fit(small_corpus, 2, iterations=10, burn_in=10)


def test_single_topic_theta_is_one(small_corpus):
    model = gibbs_fit(small_corpus, 1, iterations=3, burn_in=1)
    assert np.all(model.theta == 1.0)
    assert model.phi.sum(axis=1) == pytest.approx([1.0])


def _replay(docs, K, alpha, beta, iterations, seed):
    """Straight-line sampler drawing from the same random stream as gibbs_fit."""
    rng = np.random.default_rng(seed)
    tokens = [(m, w) for m, d in enumerate(docs) for w in d.word_ids()]
    z = [int(k) for k in rng.integers(K, size=len(tokens))]
    n_kt = [[0] * V for _ in range(K)]
    n_k = [0] * K
    n_mk = [[0] * K for _ in docs]
    for (m, w), k in zip(tokens, z):
        n_kt[k][w] += 1
        n_k[k] += 1
        n_mk[m][k] += 1
    for _ in range(iterations):
        uniforms = rng.random(len(tokens)).tolist()
        for i, (m, w) in enumerate(tokens):
            k = z[i]
            n_kt[k][w] -= 1
            n_k[k] -= 1
            n_mk[m][k] -= 1
            cum, total = [], 0.0
            for kk in range(K):
                total += (n_kt[kk][w] + beta) / (n_k[kk] + beta * V) * (n_mk[m][kk] + alpha)
                cum.append(total)
            k = min(bisect_right(cum, uniforms[i] * total), K - 1)
            z[i] = k
            n_kt[k][w] += 1
            n_k[k] += 1
            n_mk[m][k] += 1
    return z


def test_sampler_follows_its_random_stream(small_corpus):
    model = gibbs_fit(small_corpus, 3, alpha=0.25, beta=0.5, iterations=6, burn_in=2, seed=42)
    expected = _replay(small_corpus, 3, 0.25, 0.5, 6, 42)
    assert np.concatenate(model.z).tolist() == expected


def test_counts_stay_consistent(small_corpus):
    words = np.array([w for d in small_corpus for w in d.word_ids()])
    docs = np.repeat(np.arange(len(small_corpus)), [len(d.tokens) for d in small_corpus])
    seen = []

    def check(sweep, n_kt, n_mk, z):
        seen.append(sweep)
        expected_kt = np.zeros_like(n_kt)
        np.add.at(expected_kt, (z, words), 1)
        expected_mk = np.zeros_like(n_mk)
        np.add.at(expected_mk, (docs, z), 1)
        assert np.array_equal(n_kt, expected_kt)
        assert np.array_equal(n_mk, expected_mk)
        assert np.array_equal(n_kt.sum(axis=0), np.bincount(words, minlength=V))

    gibbs_fit(small_corpus, 3, iterations=5, burn_in=0, on_sweep=check)
    assert seen == [0, 1, 2, 3, 4]


def test_same_seed_same_model(small_corpus):
    a = gibbs_fit(small_corpus, 2, iterations=4, burn_in=1, seed=9)
    b = gibbs_fit(small_corpus, 2, iterations=4, burn_in=1, seed=9)
    assert a.to_json() == b.to_json()


@pytest.mark.slow
def test_planted_topics_are_recovered():
    rng = np.random.default_rng(0)
    groups = [("Home", "Gap"), ("Work", "Transport"), ("Shopping", "DrinkEat", "LeisureSport")]
    docs = [_doc(i, [groups[i % 3][j] for j in rng.integers(len(groups[i % 3]), size=32)]) for i in range(300)]
    model = gibbs_fit(docs, 3, alpha=0.1, beta=0.01, iterations=60, burn_in=40, seed=5)
    found = document_groups(model)
    per_group = [{found[d.key] for d in docs[g::3]} for g in range(3)]
    assert all(len(s) == 1 for s in per_group)
    assert len(set.union(*per_group)) == 3


def _phi_row(weights):
    row = np.zeros(V)
    for word, p in weights.items():
        row[VOCABULARY.index(word)] = p
    return row


PLANTED_PHI = np.array(
    [
        _phi_row({"Home": 0.6, "Gap": 0.25, "DailyLife": 0.15}),
        _phi_row({"Work": 0.55, "Transport": 0.25, "DrinkEat": 0.2}),
        _phi_row({"Shopping": 0.4, "LeisureSport": 0.3, "Education": 0.15, "Other": 0.15}),
    ]
)


def _planted_corpus(rng, n_docs, phi, dominance=0.85, length=32):
    """Documents cycling through the topics; each mostly draws from its own topic."""
    K = len(phi)
    docs, dominant = [], []
    for i in range(n_docs):
        k = i % K
        theta = np.full(K, (1 - dominance) / (K - 1))
        theta[k] = dominance
        topics = rng.choice(K, size=length, p=theta)
        docs.append(_doc(i, [VOCABULARY[rng.choice(V, p=phi[t])] for t in topics]))
        dominant.append(k)
    return docs, dominant


@pytest.mark.slow
def test_planted_distributions_match_after_topic_matching():
    docs, dominant = _planted_corpus(np.random.default_rng(8), 3000, PLANTED_PHI)
    model = gibbs_fit(docs, 3, alpha=0.1, beta=0.01, iterations=60, burn_in=50, seed=5)

    cost = np.array([[hellinger(p, q) for q in model.phi] for p in PLANTED_PHI])
    rows, cols = linear_sum_assignment(cost)
    assert cost[rows, cols].mean() <= 0.2

    groups = assign_groups(model)
    hits = sum(groups[d.user_id] == cols[k] for d, k in zip(docs, dominant))
    assert hits / len(docs) >= 0.9


@pytest.mark.slow
def test_sweep_prefers_several_topics_over_one():
    # Home and Work lead overall but never share a document
    rng = np.random.default_rng(21)
    groups = [{"Home": 0.7, "Gap": 0.3}, {"Work": 0.7, "Transport": 0.3}, {"Shopping": 1 / 3, "DrinkEat": 1 / 3, "LeisureSport": 1 / 3}]
    docs = []
    for i in range(300):
        g = groups[i % 3]
        words = list(g)
        docs.append(_doc(i, [words[j] for j in rng.choice(len(words), size=32, p=list(g.values()))]))

    grid = hyperparameter_sweep(docs, [0.1], [0.01], [1, 4, 5, 6, 7], iterations=60, burn_in=40, seed=3, top_n=2)
    assert (grid["error"] == "").all()
    single = grid.loc[grid["K"] == 1, "coherence"].iloc[0]
    assert single == pytest.approx(math.log(1 / 100))
    assert grid.loc[grid["K"].between(4, 7), "coherence"].max() > single


# ---------------------------
# Evaluation
# ---------------------------
def _model_with_phi(row, docs):
    return TopicModel(
        n_topics=1,
        phi=np.array([row]),
        theta=np.ones((len(docs), 1)),
        alpha=np.array([1.0]),
        beta=np.full(V, 0.1),
        z=[np.zeros(len(d.tokens), dtype=int) for d in docs],
        doc_keys=[d.key for d in docs],
        doc_users=[d.user_id for d in docs],
    )


def test_umass_by_hand():
    docs = [_doc(0, ["Home", "Work"]), _doc(1, ["Home"]), _doc(2, ["Work", "Shopping"])]
    row = np.zeros(V)
    row[VOCABULARY.index("Home")] = 0.5
    row[VOCABULARY.index("Work")] = 0.3
    row[VOCABULARY.index("Shopping")] = 0.2
    model = _model_with_phi(row, docs)
    assert model.top_words(0, 3) == [VOCABULARY.index(w) for w in ("Home", "Work", "Shopping")]
    # (Home, Work): log 2/2, (Home, Shopping): log 1/1, (Work, Shopping): log 2/1
    scores, mean = umass_coherence(model, docs, top_n=3)
    assert scores == [pytest.approx(math.log(2))]
    assert mean == pytest.approx(math.log(2))
    # a fourth word that never occurs contributes nothing
    assert umass_coherence(model, docs, top_n=4)[1] == pytest.approx(math.log(2))


def test_hellinger_values():
    assert hellinger([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert hellinger([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)
    assert hellinger([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.5412, abs=1e-4)
    with pytest.raises(ValueError):
        hellinger([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        hellinger([0.5, 0.5], [1.0, 0.0, 0.0])


def test_topic_distance_matrix(small_corpus):
    model = gibbs_fit(small_corpus, 3, iterations=4, burn_in=1)
    dist = topic_distance_matrix(model)
    assert np.allclose(dist, dist.T)
    assert np.all(np.diag(dist) == 0.0)
    assert np.all((dist >= 0) & (dist <= 1))


def test_sweep_is_deterministic_and_records_failures(small_corpus):
    kwargs = dict(alphas=[0.1, [0.1, 0.1]], betas=[0.01], topics=[1], iterations=4, burn_in=1, seed=20)
    a = hyperparameter_sweep(small_corpus, **kwargs)
    b = hyperparameter_sweep(small_corpus, threads=2, **kwargs)
    assert a.equals(b)
    assert a["seed"].tolist() == [20, 21]
    assert a.loc[0, "error"] == "" and not math.isnan(a.loc[0, "coherence"])
    assert "prior of length 2" in a.loc[1, "error"] and math.isnan(a.loc[1, "coherence"])
    with pytest.raises(TopicModelError):
        hyperparameter_sweep(small_corpus, [], [0.1], [1])


def test_assign_groups_ties_and_user_means():
    docs = [_doc(0, ["Home"], "a"), _doc(1, ["Home"], "b"), _doc(2, ["Home"], "b")]
    model = _model_with_phi(np.full(V, 1 / V), docs)
    model.n_topics = 2
    model.theta = np.array([[0.5, 0.5], [0.6, 0.4], [0.1, 0.9]])
    assert assign_groups(model) == {"a": 0, "b": 1}


def test_model_json(small_corpus):
    model = gibbs_fit(small_corpus, 2, iterations=3, burn_in=1)
    loaded = TopicModel.from_json(model.to_json())
    assert np.array_equal(loaded.phi, model.phi)
    assert np.array_equal(loaded.theta, model.theta)
    assert [z.tolist() for z in loaded.z] == [z.tolist() for z in model.z]
    assert loaded.doc_keys == model.doc_keys and loaded.vocabulary == VOCABULARY
