"""Independent reference computations used by the tests.

Everything here is deliberately naive: dense matrices, explicit loops and
textbook formulas, with no code shared with the package beyond reading the
allocation columns.
"""
import itertools
import math

import numpy as np


def union_find_supremum(a, b):
    """Supremum of two level vectors by union-find over the units."""
    n = len(a)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for codes in (a, b):
        first = {}
        for u, level in enumerate(codes):
            if level in first:
                union(first[level], u)
            else:
                first[level] = u
    return [find(u) for u in range(n)]


def same_partition(a, b):
    """Whether two level vectors induce the same partition of the units."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        return False
    fwd, back = {}, {}
    for x, y in zip(a, b):
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


def indicator(codes):
    codes = np.asarray(codes)
    levels = np.unique(codes)
    return (codes[:, None] == levels[None, :]).astype(float)


def averaging_operator(codes):
    Z = indicator(codes)
    return Z @ np.linalg.inv(Z.T @ Z) @ Z.T


def term_codes(table, term):
    """Level vector of an interaction term such as ``I:T`` built by tupling columns."""
    cols = {"I": table.intervention, "T": table.therapist, "B": table.batch, "C": table.centre}
    parts = term.split(":")
    keys = list(zip(*[cols[p] for p in parts]))
    lookup = {}
    return np.array([lookup.setdefault(k, len(lookup)) for k in keys])


def covariance_matrix(table, components):
    """Cov(Y) = sum over terms of sigma2 * Z Z' plus sigma2_E * identity."""
    n = table.n_units
    V = components["E"] * np.eye(n)
    for term, value in components.items():
        if term == "E":
            continue
        Z = indicator(term_codes(table, term))
        V += value * Z @ Z.T
    return V


def design_a_xi(sigma_u, sigma_v, sigma_e, n_i, n_r):
    """Eigenvalues of Cov(Y) on the strata of the completely randomised design."""
    xi_e = sigma_e
    xi_it = n_r * sigma_v + sigma_e
    xi_t = n_i * n_r * sigma_u + n_r * sigma_v + sigma_e
    return {"E": xi_e, "I:T": xi_it, "T": xi_t}


def design_a_components_from_ms(ms_t, rms_it, ms_e, n_i, n_r):
    """Invert the design-a expected mean squares."""
    sigma_e = ms_e
    sigma_v = (rms_it - ms_e) / n_r
    sigma_u = (ms_t - rms_it) / (n_i * n_r)
    return {"T": sigma_u, "I:T": sigma_v, "E": sigma_e}


def satterthwaite_three_term(ms_a, ms_b, ms_c, df_a, df_b, df_c):
    """df of ms_a + ms_b - ms_c by the two-moment approximation."""
    num = (ms_a + ms_b - ms_c) ** 2
    return num / (ms_a**2 / df_a + ms_b**2 / df_b + ms_c**2 / df_c)


def reml_loglik(y, X, V):
    """Restricted log-likelihood from dense matrices."""
    n, p = X.shape
    Vi = np.linalg.inv(V)
    XtViX = X.T @ Vi @ X
    P = Vi - Vi @ X @ np.linalg.inv(XtViX) @ X.T @ Vi
    _, logdet_v = np.linalg.slogdet(V)
    _, logdet_x = np.linalg.slogdet(XtViX)
    return -0.5 * ((n - p) * math.log(2 * math.pi) + logdet_v + logdet_x + y @ P @ y)


def gls(y, X, V):
    Vi = np.linalg.inv(V)
    cov = np.linalg.inv(X.T @ Vi @ X)
    return cov @ X.T @ Vi @ y, cov


def effect_coded(codes, n_levels=2):
    """Intercept plus +1/-1 coding for two levels."""
    if n_levels != 2:
        raise ValueError("oracle only codes two levels")
    return np.column_stack([np.ones(len(codes)), np.where(np.asarray(codes) == 0, 1.0, -1.0)])


def permutation_index(order):
    """Rank of a permutation among all permutations of its length."""
    perms = list(itertools.permutations(sorted(order)))
    return perms.index(tuple(order))
