# services/lda.py: collapsed-Gibbs LDA over half-hour activity sequences,
# UMass coherence, Hellinger topic distances, the prior/K sweep and group assignment.

import json
import math
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass
from datetime import date
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import gammaln
from tqdm import tqdm

from services.core_model import ActivityChain, ActivityType, day_start_epoch
from services.errors import TopicModelError
from services.helpers import get_logger, parallel_map

logger = get_logger("lda")

GAP = "Gap"
VOCABULARY: Tuple[str, ...] = tuple(a.value for a in ActivityType) + (GAP,)
WORD_INDEX = {w: i for i, w in enumerate(VOCABULARY)}

Prior = Union[float, str, Sequence[float]]
SweepCallback = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class ActivityDocument:
    user_id: str
    day: Optional[date]
    tokens: Tuple[str, ...]

    @property
    def key(self) -> str:
        return self.user_id if self.day is None else f"{self.user_id}/{self.day.isoformat()}"

    def word_ids(self) -> List[int]:
        return [WORD_INDEX[t] for t in self.tokens]


# ---------------------------
# Documents
# ---------------------------
def _tokenize_chain(
    chain: ActivityChain, start_hour: int, end_hour: int, slot_minutes: int, utc_offset_hours: float
) -> List[str]:
    slot_s = slot_minutes * 60
    n = (end_hour - start_hour) * 3600 // slot_s
    w0 = day_start_epoch(chain.day, utc_offset_hours) + start_hour * 3600
    covered = np.zeros((n, len(ActivityType)))
    order = list(ActivityType)
    for s in chain.stays:
        if s.activity is None:
            continue
        a = order.index(s.activity)
        for k in range(max(0, (s.arrival - w0) // slot_s), min(n, -(-(s.departure - w0) // slot_s))):
            lo, hi = w0 + k * slot_s, w0 + (k + 1) * slot_s
            covered[k, a] += max(0, min(s.departure, hi) - max(s.arrival, lo))
    tokens = []
    for k in range(n):
        if covered[k].max() <= 0:
            tokens.append(GAP)
        else:
            tokens.append(order[int(np.argmax(covered[k]))].value)  # ties: enum order
    return tokens


def tokenize_chains(
    chains: Iterable[ActivityChain],
    start_hour: int = 6,
    end_hour: int = 22,
    slot_minutes: int = 30,
    max_gap_share: float = 0.5,
    unit: str = "user_day",
    utc_offset_hours: float = 8.0,
) -> List[ActivityDocument]:
    """
    One word per slot: the activity covering most of it, Gap when nothing
    does. Day sequences with more than max_gap_share Gap words are dropped;
    unit="user" joins a user's remaining days into one document.
    """
    days: List[ActivityDocument] = []
    dropped = 0
    for chain in sorted(chains, key=lambda c: (c.user_id, c.day)):
        tokens = _tokenize_chain(chain, start_hour, end_hour, slot_minutes, utc_offset_hours)
        if tokens.count(GAP) > max_gap_share * len(tokens):
            dropped += 1
            continue
        days.append(ActivityDocument(chain.user_id, chain.day, tuple(tokens)))
    if dropped:
        logger.info(f"Dropped {dropped} day sequence(s) with too many Gap slots")
    if unit == "user_day":
        return days
    if unit != "user":
        raise TopicModelError(f"unknown document unit {unit!r}")
    joined: Dict[str, List[str]] = defaultdict(list)
    for d in days:
        joined[d.user_id].extend(d.tokens)
    return [ActivityDocument(u, None, tuple(t)) for u, t in sorted(joined.items())]


# ---------------------------
# Priors
# ---------------------------
def resolve_prior(spec: Prior, shape: int, n_topics: int) -> np.ndarray:
    """Numeric or list priors are taken as is; 'symmetric' is 1/K, 'asymmetric' the normalized 1/(k + sqrt(shape))."""
    if isinstance(spec, str):
        if spec == "symmetric":
            prior = np.full(shape, 1.0 / n_topics)
        elif spec == "asymmetric":
            prior = 1.0 / (np.arange(shape) + np.sqrt(shape))
            prior /= prior.sum()
        else:
            raise TopicModelError(f"unknown prior {spec!r}")
    elif isinstance(spec, (list, tuple, np.ndarray)):
        prior = np.asarray(spec, dtype=float)
        if prior.shape != (shape,):
            raise TopicModelError(f"prior of length {len(prior)} where {shape} is needed")
    else:
        prior = np.full(shape, float(spec))
    if not np.all(prior > 0):
        raise TopicModelError("Dirichlet priors must be > 0")
    return prior


def prior_label(spec: Prior) -> str:
    return spec if isinstance(spec, str) else json.dumps(spec)


# ---------------------------
# Model
# ---------------------------
@dataclass
class TopicModel:
    n_topics: int
    phi: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    z: List[np.ndarray]
    doc_keys: List[str]
    doc_users: List[str]
    seed: int = 0
    iterations: int = 0
    burn_in: int = 0
    log_likelihood: float = 0.0
    vocabulary: Tuple[str, ...] = VOCABULARY

    def top_words(self, k: int, n: int) -> List[int]:
        # descending phi, ties by word index
        return sorted(range(len(self.vocabulary)), key=lambda w: (-self.phi[k, w], w))[:n]

    def to_json(self) -> str:
        return json.dumps(
            {
                "K": self.n_topics,
                "vocabulary": list(self.vocabulary),
                "phi": self.phi.tolist(),
                "theta": self.theta.tolist(),
                "alpha": self.alpha.tolist(),
                "beta": self.beta.tolist(),
                "z": [z.tolist() for z in self.z],
                "documents": [{"key": k, "user_id": u} for k, u in zip(self.doc_keys, self.doc_users)],
                "seed": self.seed,
                "iterations": self.iterations,
                "burn_in": self.burn_in,
                "log_likelihood": self.log_likelihood,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TopicModel":
        data = json.loads(text)
        return cls(
            n_topics=int(data["K"]),
            phi=np.asarray(data["phi"], dtype=float),
            theta=np.asarray(data["theta"], dtype=float),
            alpha=np.asarray(data["alpha"], dtype=float),
            beta=np.asarray(data["beta"], dtype=float),
            z=[np.asarray(z, dtype=int) for z in data["z"]],
            doc_keys=[d["key"] for d in data["documents"]],
            doc_users=[d["user_id"] for d in data["documents"]],
            seed=int(data["seed"]),
            iterations=int(data["iterations"]),
            burn_in=int(data["burn_in"]),
            log_likelihood=float(data["log_likelihood"]),
            vocabulary=tuple(data["vocabulary"]),
        )


def _log_likelihood(n_kt: np.ndarray, beta: np.ndarray) -> float:
    """log p(w | z) of the current assignments."""
    n_k = n_kt.sum(axis=1)
    per_topic = gammaln(beta.sum()) - gammaln(beta).sum() + gammaln(n_kt + beta).sum(axis=1) - gammaln(n_k + beta.sum())
    return float(per_topic.sum())


def gibbs_fit(
    docs: Sequence[ActivityDocument],
    n_topics: int,
    alpha: Prior = "symmetric",
    beta: Prior = "symmetric",
    iterations: int = 1000,
    burn_in: int = 800,
    seed: int = 11,
    on_sweep: Optional[SweepCallback] = None,
    progress: bool = False,
) -> TopicModel:
    """
    Collapsed Gibbs sampling. z starts from rng.integers(K) per token in
    document order; each sweep draws one uniform per token (rng.random of
    the token count) and picks the first topic whose cumulative weight
    exceeds u * total. phi and theta come from the final counts.
    """
    if not docs:
        raise TopicModelError("cannot fit a topic model on an empty corpus")
    if n_topics < 1:
        raise TopicModelError("n_topics must be >= 1")
    if not iterations > burn_in >= 0:
        raise TopicModelError("iterations must exceed burn_in")

    K, V = n_topics, len(VOCABULARY)
    a = resolve_prior(alpha, K, K)
    b = resolve_prior(beta, V, K)
    rng = np.random.default_rng(seed)

    doc_of: List[int] = []
    word_of: List[int] = []
    for m, d in enumerate(docs):
        for w in d.word_ids():
            doc_of.append(m)
            word_of.append(w)
    n_tokens = len(word_of)
    if n_tokens == 0:
        raise TopicModelError("corpus holds no tokens")

    z = [int(k) for k in rng.integers(K, size=n_tokens)]
    n_kt = [[0] * V for _ in range(K)]
    n_k = [0] * K
    n_mk = [[0] * K for _ in range(len(docs))]
    for i in range(n_tokens):
        n_kt[z[i]][word_of[i]] += 1
        n_k[z[i]] += 1
        n_mk[doc_of[i]][z[i]] += 1

    alpha_l = a.tolist()
    beta_l = b.tolist()
    beta_sum = float(b.sum())
    topics = range(K)
    cum = [0.0] * K

    for sweep in tqdm(range(iterations), desc=f"gibbs K={K}", disable=not progress, leave=False):
        uniforms = rng.random(n_tokens).tolist()
        for i in range(n_tokens):
            m, w, k = doc_of[i], word_of[i], z[i]
            n_kt[k][w] -= 1
            n_k[k] -= 1
            row = n_mk[m]
            row[k] -= 1
            total = 0.0
            bw = beta_l[w]
            for kk in topics:
                total += (n_kt[kk][w] + bw) / (n_k[kk] + beta_sum) * (row[kk] + alpha_l[kk])
                cum[kk] = total
            k = bisect_right(cum, uniforms[i] * total)
            if k >= K:
                k = K - 1
            z[i] = k
            n_kt[k][w] += 1
            n_k[k] += 1
            row[k] += 1
        if on_sweep is not None:
            on_sweep(sweep, np.asarray(n_kt, dtype=int), np.asarray(n_mk, dtype=int), np.asarray(z, dtype=int))

    nkt = np.asarray(n_kt, dtype=float)
    nmk = np.asarray(n_mk, dtype=float)
    phi = (nkt + b) / (nkt.sum(axis=1, keepdims=True) + beta_sum)
    theta = (nmk + a) / (nmk.sum(axis=1, keepdims=True) + a.sum())

    z_arr = np.asarray(z, dtype=int)
    bounds = np.cumsum([0] + [len(d.tokens) for d in docs])
    model = TopicModel(
        n_topics=K,
        phi=phi,
        theta=theta,
        alpha=a,
        beta=b,
        z=[z_arr[bounds[m] : bounds[m + 1]] for m in range(len(docs))],
        doc_keys=[d.key for d in docs],
        doc_users=[d.user_id for d in docs],
        seed=seed,
        iterations=iterations,
        burn_in=burn_in,
        log_likelihood=_log_likelihood(nkt, b),
    )
    logger.info(f"✅ LDA K={K}: {len(docs)} document(s), {n_tokens} token(s), log-likelihood {model.log_likelihood:.2f}")
    return model


# ---------------------------
# Evaluation
# ---------------------------
def umass_coherence(
    model: TopicModel, docs: Sequence[ActivityDocument], top_n: int = 4
) -> Tuple[List[float], float]:
    """
    Per-topic sum over ranked top-word pairs i < j of
    log((D(wi, wj) + 1) / D(wj)), and the mean over topics.
    """
    sets = [set(d.word_ids()) for d in docs]
    df: Dict[int, int] = defaultdict(int)
    for s in sets:
        for w in s:
            df[w] += 1

    def co(wi: int, wj: int) -> int:
        return sum(1 for s in sets if wi in s and wj in s)

    scores = []
    for k in range(model.n_topics):
        words = model.top_words(k, top_n)
        score = 0.0
        for i in range(len(words)):
            for j in range(i + 1, len(words)):
                wi, wj = words[i], words[j]
                if df[wj] == 0:
                    logger.warning(
                        f"⚠️ Topic {k}: word {VOCABULARY[wj]} never occurs, pair ({VOCABULARY[wi]}, {VOCABULARY[wj]}) skipped"
                    )
                    continue
                score += math.log((co(wi, wj) + 1) / df[wj])
        scores.append(score)
    return scores, float(np.mean(scores))


def hellinger(p: Sequence[float], q: Sequence[float]) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} is not a normalized distribution")
    value = math.sqrt(0.5 * float(np.sum((np.sqrt(p) - np.sqrt(q)) ** 2)))
    return min(1.0, value)


def topic_distance_matrix(model: TopicModel) -> np.ndarray:
    K = model.n_topics
    out = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            out[i, j] = out[j, i] = hellinger(model.phi[i], model.phi[j])
    return out


def hyperparameter_sweep(
    docs: Sequence[ActivityDocument],
    alphas: Sequence[Prior],
    betas: Sequence[Prior],
    topics: Sequence[int],
    iterations: int = 200,
    burn_in: int = 150,
    seed: int = 11,
    top_n: int = 4,
    threads: int = 1,
) -> pd.DataFrame:
    """
    One fit per (alpha, beta, K) cell with seed + cell index. A failing cell
    records its error and the sweep carries on.
    """
    if not (alphas and betas and topics):
        raise TopicModelError("sweep grid is empty")
    cells = [(a, b, k) for a in alphas for b in betas for k in topics]

    def run(indexed):
        i, (a, b, k) = indexed
        row = {"alpha": prior_label(a), "beta": prior_label(b), "K": int(k), "seed": seed + i, "coherence": float("nan"), "error": ""}
        try:
            model = gibbs_fit(docs, k, a, b, iterations, burn_in, seed + i)
            _, row["coherence"] = umass_coherence(model, docs, top_n)
        except Exception as e:
            logger.warning(f"⚠️ Sweep cell alpha={row['alpha']} beta={row['beta']} K={k} failed: {e}")
            row["error"] = str(e)
        return row

    rows = parallel_map(run, list(enumerate(cells)), threads)
    return pd.DataFrame(rows, columns=["alpha", "beta", "K", "seed", "coherence", "error"])


def document_groups(model: TopicModel) -> Dict[str, int]:
    return {key: int(np.argmax(row)) for key, row in zip(model.doc_keys, model.theta)}


def assign_groups(model: TopicModel) -> Dict[str, int]:
    """Group of each user: argmax of the user's mean theta row, ties to the smallest topic."""
    rows: Dict[str, List[np.ndarray]] = defaultdict(list)
    for user, row in zip(model.doc_users, model.theta):
        rows[user].append(row)
    return {user: int(np.argmax(np.mean(r, axis=0))) for user, r in sorted(rows.items())}
