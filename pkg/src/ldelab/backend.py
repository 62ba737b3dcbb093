"""Embedding post-processing and trial scoring.

Pipeline order is center -> LDA -> (PLDA | cosine); either stage of
post-processing can be skipped to score raw embeddings.  No length
normalization is applied anywhere.

PLDA here is the two-covariance model: a speaker mean ``y ~ N(mu, B)`` and
observations ``x ~ N(y, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ldelab.errors import ArgumentError, NumericError, ShapeError
from ldelab.substrate.linalg import sym_eig

BACKENDS = ("plda", "cosine")


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"expected a non-empty (n, dim) matrix of embeddings, got shape {x.shape}")
    return x


def _group(labels) -> tuple[np.ndarray, int]:
    _, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv, int(inv.max()) + 1


# --------------------------------------------------------------------------
# centering


@dataclass(frozen=True)
class CenteringStats:
    mean: np.ndarray

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ShapeError(f"centering: embedding dim {x.shape[-1]} != {self.mean.shape[0]}")
        return x - self.mean


def center_fit(embeddings) -> CenteringStats:
    return CenteringStats(_as_matrix(embeddings).mean(axis=0))


def center_apply(stats: CenteringStats, x) -> np.ndarray:
    return stats.apply(x)


# --------------------------------------------------------------------------
# LDA


@dataclass(frozen=True)
class LdaTransform:
    matrix: np.ndarray  # (out_dim, in_dim)
    eigenvalues: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.matrix.shape[1]:
            raise ShapeError(f"lda: embedding dim {x.shape[-1]} != {self.matrix.shape[1]}")
        return x @ self.matrix.T


def scatter_matrices(x: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Within- and between-class scatter, each normalized by the sample count."""
    inv, k = _group(labels)
    n, d = x.shape
    mu = x.mean(axis=0)
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for c in range(k):
        xc = x[inv == c]
        mc = xc.mean(axis=0)
        r = xc - mc
        sw += r.T @ r
        dm = (mc - mu)[:, None]
        sb += len(xc) * (dm @ dm.T)
    return sw / n, sb / n


def lda_fit(embeddings, labels, out_dim: int = 200) -> LdaTransform:
    """Directions solving S_b v = lambda (S_w + eps I) v, eps = 1e-6 tr(S_w)/dim.

    S_w is whitened with a symmetric eigendecomposition, the whitened S_b is
    diagonalized, and the projection keeps the ``out_dim`` leading directions
    so that the projected within-class scatter is (nearly) the identity.
    """
    x = _as_matrix(embeddings)
    inv, k = _group(labels)
    if len(inv) != x.shape[0]:
        raise ShapeError("lda: one label per embedding required")
    counts = np.bincount(inv)
    if k < 2 or counts.min() < 2:
        raise ArgumentError("lda needs at least 2 speakers with at least 2 embeddings each")
    d = x.shape[1]
    if out_dim < 1 or out_dim > min(d, k - 1):
        raise ArgumentError(f"lda out_dim {out_dim} exceeds min(dim={d}, speakers-1={k - 1})")
    sw, sb = scatter_matrices(x, labels)
    eps = 1e-6 * np.trace(sw) / d
    if eps <= 0:
        eps = 1e-12
    lam_w, u = sym_eig(0.5 * (sw + sw.T) + eps * np.eye(d))
    whiten = u / np.sqrt(lam_w)
    m = whiten.T @ sb @ whiten
    lam_b, e = sym_eig(0.5 * (m + m.T))
    v = whiten @ e[:, :out_dim]
    return LdaTransform(v.T.copy(), lam_b[:out_dim])


# --------------------------------------------------------------------------
# PLDA


def _chol(a: np.ndarray, what: str, iteration: int | None = None) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        at = f" at EM iteration {iteration}" if iteration is not None else ""
        raise NumericError(f"{what} is not positive definite{at}") from None


def _logdet(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


@dataclass
class PldaModel:
    mu: np.ndarray
    between: np.ndarray
    within: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def log_likelihood(self, x, labels) -> float:
        """Total marginal log-likelihood of the data, speakers integrated out."""
        return plda_log_likelihood(self, x, labels)

    def _scoring_terms(self):
        if "terms" not in self._cache:
            d = self.dim
            tot = self.between + self.within
            joint = np.block([[tot, self.between], [self.between, tot]])
            lt = _chol(tot, "total covariance")
            lj = _chol(joint, "same-speaker covariance")
            jinv = np.linalg.inv(joint)
            tinv = np.linalg.inv(tot)
            q = jinv[:d, :d] - tinv
            p = jinv[:d, d:]
            q = 0.5 * (q + q.T)
            p = 0.5 * (p + p.T)
            const = -0.5 * _logdet(lj) + _logdet(lt)
            self._cache["terms"] = (q, p, const)
        return self._cache["terms"]

    def score(self, enroll, test) -> float:
        return plda_score(self, enroll, test)

    def score_matrix(self, enroll, test) -> np.ndarray:
        """LLR for every (row of enroll, row of test) pair."""
        q, p, const = self._scoring_terms()
        e = np.atleast_2d(np.asarray(enroll, dtype=np.float64)) - self.mu
        t = np.atleast_2d(np.asarray(test, dtype=np.float64)) - self.mu
        qe = np.einsum("ij,jk,ik->i", e, q, e)
        qt = np.einsum("ij,jk,ik->i", t, q, t)
        cross = e @ p @ t.T
        return -0.5 * (qe[:, None] + qt[None, :]) - cross + const


def plda_log_likelihood(model: PldaModel, x, labels) -> float:
    x = _as_matrix(x)
    inv, k = _group(labels)
    d = model.dim
    lw = _chol(model.within, "within covariance")
    winv = np.linalg.inv(model.within)
    logdet_w = _logdet(lw)
    total = 0.0
    for c in range(k):
        xc = x[inv == c]
        n = len(xc)
        mean = xc.mean(axis=0)
        r = xc - mean
        a = model.within + n * model.between
        la = _chol(a, "W + nB")
        dm = mean - model.mu
        sol = np.linalg.solve(a, dm)
        quad = float(np.einsum("ij,jk,ik->", r, winv, r)) + n * float(dm @ sol)
        total += -0.5 * (n * d * np.log(2 * np.pi) + (n - 1) * logdet_w + _logdet(la) + quad)
    return total


def _moment_init(x: np.ndarray, inv: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, d = x.shape
    mu = x.mean(axis=0)
    counts = np.bincount(inv, minlength=k)
    means = np.stack([x[inv == c].mean(axis=0) for c in range(k)])
    total = np.cov(x.T, bias=True).reshape(d, d)
    resid = x - means[inv]
    dof = n - k
    if dof > 0:
        w = resid.T @ resid / dof
    else:
        w = 0.5 * total
    if np.linalg.eigvalsh(w).min() <= 1e-10 * max(np.trace(total) / d, 1e-300):
        w = 0.5 * total + 1e-6 * np.trace(total) / d * np.eye(d)
    dm = means - means.mean(axis=0)
    b = dm.T @ dm / k - w * np.mean(1.0 / counts)
    lam, u = np.linalg.eigh(0.5 * (b + b.T))
    b = (u * np.maximum(lam, 1e-3 * np.trace(w) / d)) @ u.T
    return mu, b, w


def plda_fit(embeddings, labels, iters: int = 20, return_history: bool = False):
    """EM estimate of the two-covariance PLDA model.

    E-step: each speaker's posterior over y has precision ``B^-1 + n W^-1``.
    M-step: ``mu`` and ``B`` from the posterior means and covariances,
    ``W`` from the residuals of each observation around its speaker posterior.
    With ``return_history`` the log-likelihood before every iteration and
    after the last is also returned.
    """
    x = _as_matrix(embeddings)
    inv, k = _group(labels)
    if len(inv) != x.shape[0]:
        raise ShapeError("plda: one label per embedding required")
    if k < 2:
        raise ArgumentError("plda needs at least 2 speakers")
    n, d = x.shape
    mu, b, w = _moment_init(x, inv, k)
    counts = np.bincount(inv, minlength=k).astype(np.float64)
    sums = np.zeros((k, d))
    np.add.at(sums, inv, x)
    scatter = x.T @ x
    history = []
    model = PldaModel(mu, b, w)
    for it in range(iters):
        if return_history:
            history.append(plda_log_likelihood(model, x, inv))
        _chol(w, "within covariance", it)
        binv = np.linalg.inv(b)
        winv = np.linalg.inv(w)
        post_mean = np.empty((k, d))
        post_cov_sum_b = np.zeros((d, d))
        post_cov_sum_w = np.zeros((d, d))
        for c in range(k):
            prec = binv + counts[c] * winv
            cov = np.linalg.inv(prec)
            cov = 0.5 * (cov + cov.T)
            post_mean[c] = cov @ (binv @ mu + winv @ sums[c])
            post_cov_sum_b += cov
            post_cov_sum_w += counts[c] * cov
        mu = post_mean.mean(axis=0)
        dm = post_mean - mu
        b = (post_cov_sum_b + dm.T @ dm) / k
        # sum_ij (x_ij - y_i)(x_ij - y_i)^T expanded with per-speaker sums
        cross = sums.T @ post_mean
        w = (scatter - cross - cross.T + (post_mean.T * counts) @ post_mean + post_cov_sum_w) / n
        b = 0.5 * (b + b.T)
        w = 0.5 * (w + w.T)
        _chol(w, "within covariance", it + 1)
        model = PldaModel(mu, b, w)
    if return_history:
        history.append(plda_log_likelihood(model, x, inv))
        return model, history
    return model


def plda_score(model: PldaModel, enroll, test) -> float:
    """Same-vs-different speaker log-likelihood ratio; exactly symmetric in its arguments."""
    q, p, const = model._scoring_terms()
    e = np.asarray(enroll, dtype=np.float64)
    t = np.asarray(test, dtype=np.float64)
    if e.shape != (model.dim,) or t.shape != (model.dim,):
        raise ShapeError(f"plda_score: expected vectors of dim {model.dim}, got {e.shape} and {t.shape}")
    e = e - model.mu
    t = t - model.mu
    quad = float(e @ q @ e) + float(t @ q @ t)
    cross = float(e @ p @ t) + float(t @ p @ e)
    return -0.5 * quad - 0.5 * cross + const


# --------------------------------------------------------------------------
# score normalization and cosine


def snorm(raw: float, enroll_cohort, test_cohort) -> float:
    """Symmetric normalization ``((s - mu_e)/sd_e + (s - mu_t)/sd_t) / 2`` with population stds."""
    e = np.asarray(enroll_cohort, dtype=np.float64)
    t = np.asarray(test_cohort, dtype=np.float64)
    if e.size == 0 or t.size == 0:
        raise ArgumentError("s-norm cohorts must be non-empty")
    se, st = e.std(), t.std()
    if se == 0 or st == 0:
        raise NumericError("s-norm cohort has zero standard deviation")
    return 0.5 * ((raw - e.mean()) / se + (raw - t.mean()) / st)


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_score: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ArgumentError("cosine_score of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ArgumentError("cosine_score of a zero vector")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


# --------------------------------------------------------------------------
# full backend


@dataclass(frozen=True)
class ScoreRecord:
    enroll_id: str
    test_id: str
    score: float


@dataclass
class Backend:
    kind: str = "plda"
    centering: CenteringStats | None = None
    lda: LdaTransform | None = None
    plda: PldaModel | None = None
    cohort: np.ndarray | None = None

    @classmethod
    def fit(cls, embeddings, labels, kind: str = "plda", postprocess: bool = True, lda_dim: int = 200,
            use_snorm: bool = True, plda_iters: int = 20) -> "Backend":
        """Fit the chain on training embeddings.

        ``lda_dim`` is capped at ``min(dim, speakers - 1)`` so desk-sized
        training sets can use the default.
        """
        if kind not in BACKENDS:
            raise ArgumentError(f"backend must be one of {BACKENDS}, got {kind!r}")
        x = _as_matrix(embeddings)
        centering = lda = None
        if postprocess:
            centering = center_fit(x)
            x = centering.apply(x)
            _, k = _group(labels)
            lda = lda_fit(x, labels, min(lda_dim, x.shape[1], k - 1))
            x = lda.apply(x)
        plda = plda_fit(x, labels, plda_iters) if kind == "plda" else None
        return cls(kind, centering, lda, plda, x if use_snorm else None)

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.centering is not None:
            x = self.centering.apply(x)
        if self.lda is not None:
            x = self.lda.apply(x)
        return x

    def _raw(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.kind == "plda":
            return self.plda.score_matrix(a, b)
        return cosine_matrix(a, b)

    def score_pairs(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        """Scores for row-aligned pairs of already transformed embeddings."""
        e = np.atleast_2d(enroll)
        t = np.atleast_2d(test)
        if self.kind == "plda":
            q, p, const = self.plda._scoring_terms()
            ec, tc = e - self.plda.mu, t - self.plda.mu
            quad = np.einsum("ij,jk,ik->i", ec, q, ec) + np.einsum("ij,jk,ik->i", tc, q, tc)
            cross = np.einsum("ij,jk,ik->i", ec, p, tc) + np.einsum("ij,jk,ik->i", tc, p, ec)
            raw = -0.5 * quad - 0.5 * cross + const
        else:
            raw = np.array([cosine_score(a, b) for a, b in zip(e, t)])
        if self.cohort is None:
            return raw
        ce = self._raw(e, self.cohort)
        ct = self._raw(t, self.cohort)
        se, st = ce.std(axis=1), ct.std(axis=1)
        if np.any(se == 0) or np.any(st == 0):
            raise NumericError("s-norm cohort has zero standard deviation")
        return 0.5 * ((raw - ce.mean(axis=1)) / se + (raw - ct.mean(axis=1)) / st)

    def score(self, enroll, test) -> float:
        return float(self.score_pairs(self.transform(enroll), self.transform(test))[0])


def format_scores(records) -> str:
    return "".join(f"{r.enroll_id} {r.test_id} {r.score:.6f}\n" for r in records)


def parse_scores(text: str) -> list[ScoreRecord]:
    from ldelab.errors import FormatError

    out = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        parts = line.split(" ")
        try:
            if len(parts) != 3:
                raise ValueError
            out.append(ScoreRecord(parts[0], parts[1], float(parts[2])))
        except ValueError:
            raise FormatError(f"score line {lineno} is malformed: {line!r}") from None
    return out
