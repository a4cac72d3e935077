"""Marginal likelihood of ordinal responses under a one-factor probit model.

The observed category arises from a continuous latent response crossing
item thresholds; the latent trait is integrated out with Gauss-Hermite
quadrature (probabilist weights, normalized against the standard normal
density, affinely mapped by the group mean and variance):

    P(y_j = k | eta) = Phi((tau_jk - nu_j - lam_j*eta)/sigma_j)
                     - Phi((tau_j,k-1 - nu_j - lam_j*eta)/sigma_j)

    loglik_i = log sum_q w_q * prod_j P(y_ij | eta_q),
    eta_q = mu_g + sqrt(phi_g) * x_q

Accumulation over quadrature nodes runs in log space (log-sum-exp) so many
items cannot underflow.  When the structural step is switched on, the
integrand also carries the normal density of the outcome given the trait.
All functions are pure; respondent terms are reduced with numpy's pairwise
summation so totals do not depend on worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .model import MISSING_CODE

_LOG_2PI = float(np.log(2.0 * np.pi))
_TINY = 1e-300


class LikelihoodError(ValueError):
    """Invalid parameter values passed to a likelihood routine."""


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes/weights normalized for N(0, 1) expectations.

    Weights sum to one; nodes are exactly symmetric about zero with the
    middle node pinned to 0 (odd count).
    """

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise LikelihoodError("nodes and weights must be matching 1-d arrays")
        if nodes.size % 2 == 0:
            raise LikelihoodError("quadrature count must be odd")
        if np.any(weights <= 0):
            raise LikelihoodError("quadrature weights must be positive")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def count(self):
        return self.nodes.size

    @classmethod
    def gauss_hermite(cls, count):
        if count < 7 or count % 2 == 0:
            raise LikelihoodError("count must be odd and >= 7")
        x, w = np.polynomial.hermite_e.hermegauss(count)
        w = w / w.sum()
        x = (x - x[::-1]) / 2.0  # force exact symmetry
        x[count // 2] = 0.0
        w = (w + w[::-1]) / 2.0
        return cls(nodes=x, weights=w)

    def mapped(self, mean, variance):
        """Trait values for a group: mean + sqrt(variance) * nodes."""
        return mean + np.sqrt(variance) * self.nodes


def category_probability(loading, thresholds, resid_var, trait, category):
    """Probability of one ordered category at a fixed trait value.

    Thresholds must be strictly increasing; the outermost cut points are
    -inf and +inf, so probabilities over categories sum to one.
    """
    tau = np.asarray(thresholds, dtype=float)
    if tau.size > 1 and not np.all(np.diff(tau) > 0):
        raise LikelihoodError("thresholds must be strictly increasing")
    if resid_var <= 0:
        raise LikelihoodError("residual variance must be positive")
    k = int(category)
    if not 1 <= k <= tau.size + 1:
        raise LikelihoodError(f"category {k} outside 1..{tau.size + 1}")
    sigma = np.sqrt(resid_var)
    z = (tau[:, None] - loading * float(trait)) / sigma
    return float(_category_probs(z)[k - 1, 0])


def _category_probs(z):
    """Category probabilities from threshold z-scores, shape (K, ...).

    Interior categories are differences of normal CDFs evaluated on
    whichever tail avoids cancellation, so probabilities stay accurate far
    into the tails (needed because posterior-weighted hazard ratios divide
    by them).
    """
    lower = ndtr(z)
    upper = ndtr(-z)
    K = z.shape[0] + 1
    probs = np.empty((K,) + z.shape[1:])
    probs[0] = lower[0]
    probs[-1] = upper[-1]
    for k in range(1, K - 1):
        low_diff = lower[k] - lower[k - 1]
        up_diff = upper[k - 1] - upper[k]
        probs[k] = np.where(z[k] <= 0.0, low_diff, up_diff)
    np.clip(probs, _TINY, None, out=probs)
    return probs


def _log_prob_table(loading, thresholds, resid_var, traits):
    """log P(category | trait) table of shape (K + 1, Q).

    Row 0 corresponds to the missing code and is identically zero, so
    fancy-indexing by raw codes drops missing responses from the product.
    """
    tau = np.asarray(thresholds, dtype=float)
    sigma = np.sqrt(resid_var)
    z = (tau[:, None] - loading * traits[None, :]) / sigma
    K = tau.size + 1
    probs = _category_probs(z)
    table = np.zeros((K + 1, traits.size))
    table[1:] = np.log(probs)
    # extreme categories in log space stay exact arbitrarily deep in the tails
    table[1] = log_ndtr(z[0])
    table[K] = log_ndtr(-z[-1])
    return table, probs, z


def _logsumexp_rows(a):
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def group_log_posterior(codes, loadings, thresholds, resid_var, mean, variance, rule,
                        outcome=None, covariates=None, structural_g=None):
    """Per-row marginal loglik and posterior node weights for one group.

    ``codes`` is (n, J) with 0 = missing.  Returns ``(loglik (n,), post (n, Q))``
    where ``post`` holds normalized posterior weights of the quadrature nodes
    given each row's responses (and outcome, when supplied).
    """
    traits = rule.mapped(mean, variance)
    n = codes.shape[0]
    A = np.zeros((n, traits.size))
    for j in range(codes.shape[1]):
        table, _, _ = _log_prob_table(loadings[j], thresholds[j], resid_var[j], traits)
        A += table[codes[:, j]]
    if outcome is not None and structural_g is not None:
        A += _outcome_log_density(outcome, covariates, traits, structural_g)
    B = A + np.log(rule.weights)[None, :]
    ll = _logsumexp_rows(B)
    post = np.exp(B - ll[:, None])
    return ll, post


def _outcome_log_density(outcome, covariates, traits, structural_g):
    """log N(y; a + b*trait + coefs'X, resid_var) per (row, node); 0 when y missing."""
    a, b, coefs, psi = structural_g
    loc = a + b * traits[None, :]
    if covariates is not None and coefs.size:
        loc = loc + (covariates @ coefs)[:, None]
    resid = outcome[:, None] - loc
    out = -0.5 * (_LOG_2PI + np.log(psi)) - 0.5 * resid * resid / psi
    missing = np.isnan(outcome)
    if missing.any():
        out[missing] = 0.0
    return out


def _structural_slice(params, g):
    s = params.structural
    if s is None:
        return None
    return (
        float(s.intercept[g]),
        float(s.slope[g]),
        np.asarray(s.covariate_coefs[g], dtype=float),
        float(s.resid_var[g]),
    )


def respondent_loglik(responses, params, group, rule):
    """Marginal log-likelihood of one respondent's responses.

    ``responses`` uses 1-based category codes with 0 or None for missing;
    a respondent with no observed items contributes exactly 0.
    """
    codes = np.asarray(
        [MISSING_CODE if c is None else int(c) for c in np.atleast_1d(responses)],
        dtype=np.int64,
    )
    if (codes == MISSING_CODE).all():
        return 0.0
    ll, _ = group_log_posterior(
        codes[None, :],
        params.loadings[group],
        params.thresholds[group],
        params.residual_variance[group],
        float(params.latent_mean[group]),
        float(params.latent_variance[group]),
        rule,
    )
    return float(ll[0])


def total_loglik(dataset, params, rule, include_structural=False, item_subset=None):
    """Sum of respondent marginal log-likelihoods over the dataset.

    ``item_subset`` restricts the likelihood to the named items (model item
    order); with ``include_structural`` the outcome enters as an additional
    conditionally normal indicator.
    """
    if include_structural and params.structural is None:
        raise LikelihoodError("structural parameters required")
    if include_structural and dataset.outcome is None:
        raise LikelihoodError("dataset has no outcome column")
    cols = (
        np.arange(dataset.n_items)
        if item_subset is None
        else np.array([dataset.item_index(n) for n in item_subset])
    )
    total = 0.0
    for g in range(len(dataset.groups)):
        sel = dataset.group_index == g
        if not sel.any():
            continue
        codes = dataset.codes[np.ix_(sel, cols)]
        outcome = dataset.outcome[sel] if include_structural else None
        covs = dataset.covariates[sel] if (include_structural and dataset.covariates is not None) else None
        ll, _ = group_log_posterior(
            codes,
            params.loadings[g],
            params.thresholds[g],
            params.residual_variance[g],
            float(params.latent_mean[g]),
            float(params.latent_variance[g]),
            rule,
            outcome=outcome,
            covariates=covs,
            structural_g=_structural_slice(params, g) if include_structural else None,
        )
        total += float(ll.sum())
    return total


def group_loglik_and_gradient(codes, counts, loadings, thresholds, resid_var, mean,
                              variance, rule, outcome=None, covariates=None,
                              structural_g=None):
    """Count-weighted loglik and raw-parameter gradients for one group.

    Returns ``(loglik, grads)`` where ``grads`` holds arrays keyed by
    ``"loading" (J,)``, ``"threshold" (list of (K_j-1,))``, ``"mean"``,
    ``"variance"`` and, when a structural slice is supplied,
    ``"out_intercept"``, ``"out_slope"``, ``"out_coef" (C,)``,
    ``"out_resid_var"``.  Gradients are with respect to the natural
    parameters (thresholds and variances untransformed).
    """
    traits = rule.mapped(mean, variance)
    Q = traits.size
    n, J = codes.shape
    A = np.zeros((n, Q))
    tabs = []
    for j in range(J):
        table, probs, z = _log_prob_table(loadings[j], thresholds[j], resid_var[j], traits)
        A += table[codes[:, j]]
        tabs.append((probs, z))
    if outcome is not None and structural_g is not None:
        A += _outcome_log_density(outcome, covariates, traits, structural_g)
    B = A + np.log(rule.weights)[None, :]
    ll_rows = _logsumexp_rows(B)
    total = float(counts @ ll_rows)
    W = np.exp(B - ll_rows[:, None]) * counts[:, None]

    grads = {
        "loading": np.zeros(J),
        "threshold": [np.zeros(len(thresholds[j])) for j in range(J)],
        "mean": 0.0,
        "variance": 0.0,
    }
    S = np.zeros((n, Q))  # d(log integrand)/d(trait) per (row, node)
    for j in range(J):
        probs, z = tabs[j]
        K = probs.shape[0]
        sigma = np.sqrt(resid_var[j])
        dens = np.exp(-0.5 * z * z) / (np.sqrt(2.0 * np.pi) * sigma)  # (K-1, Q)
        dens_pad = np.zeros((K + 2, Q))
        dens_pad[2:-1] = dens  # dens_pad[c+1] = density at upper cut of category c
        prob_pad = np.vstack([np.ones(Q), probs])  # row 0 backs the missing code
        cj = codes[:, j]
        pc = prob_pad[cj]
        diff = (dens_pad[cj + 1] - dens_pad[cj]) / pc  # (f_c - f_{c-1})/P_c, 0 for missing
        grads["loading"][j] = -float((W * diff * traits[None, :]).sum())
        S += -loadings[j] * diff
        for k in range(K - 1):
            up = cj == k + 1  # category whose upper cut is tau_k
            lo = cj == k + 2  # category whose lower cut is tau_k
            acc = 0.0
            if up.any():
                acc += (W[up] * (dens[k][None, :] / prob_pad[cj[up]])).sum()
            if lo.any():
                acc -= (W[lo] * (dens[k][None, :] / prob_pad[cj[lo]])).sum()
            grads["threshold"][j][k] = float(acc)
    if outcome is not None and structural_g is not None:
        a, b, coefs, psi = structural_g
        loc = a + b * traits[None, :]
        if covariates is not None and coefs.size:
            loc = loc + (covariates @ coefs)[:, None]
        resid = outcome[:, None] - loc
        missing = np.isnan(outcome)
        if missing.any():
            resid[missing] = 0.0
        S += b * resid / psi
        grads["out_intercept"] = float((W * resid).sum() / psi)
        grads["out_slope"] = float((W * resid * traits[None, :]).sum() / psi)
        if covariates is not None and coefs.size:
            grads["out_coef"] = (W * resid).sum(axis=1) @ covariates / psi
        else:
            grads["out_coef"] = np.zeros(0)
        grads["out_resid_var"] = float(
            (W * (resid * resid / (2.0 * psi * psi))).sum()
            - (W[~missing].sum() if missing.any() else W.sum()) / (2.0 * psi)
        )
    WS = W * S
    grads["mean"] = float(WS.sum())
    grads["variance"] = float((WS * rule.nodes[None, :]).sum() / (2.0 * np.sqrt(variance)))
    return total, grads
