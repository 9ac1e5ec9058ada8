"""Statistics comparing generated feature series with training features."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import ks_2samp

from .d2d_gmm import GmmParams, dataset_stats, fit_gmm
from .features import FEATURE_NAMES

KS_LIMIT = 0.05
CORR_LIMIT = 0.1
ACF_LIMIT = 0.05
DEFECT_LIMIT = 0.02


def within_device_corr(values):
    """4x4 cycle-to-cycle correlation matrix, computed per device and averaged.

    ``values`` is (N, M, 4). Pooling raw samples instead would mostly measure
    the device-to-device scatter of the means.
    """
    x = values - values.mean(axis=0)
    cov = np.einsum("nmi,nmj->mij", x, x)
    sd = np.sqrt(np.einsum("mii->mi", cov))
    return (cov / (sd[:, :, None] * sd[:, None, :])).mean(axis=0)


def lag1_autocorr(values):
    """Lag-1 autocorrelation per feature, per device then averaged -> (4,)."""
    x = values - values.mean(axis=0)
    num = np.sum(x[1:] * x[:-1], axis=0)
    den = np.sum(x * x, axis=0)
    return (num / den).mean(axis=0)


def pooled_ks(a, b):
    """Two-sample KS statistic per feature on pooled (N, M, 4) arrays."""
    return np.array([ks_2samp(a[..., i].ravel(), b[..., i].ravel()).statistic for i in range(a.shape[-1])])


def component_weight_near(gmm: GmmParams, raw_mean):
    """Weight of the component whose mean is closest to ``raw_mean`` (standardized distance)."""
    target = (np.asarray(raw_mean) - gmm.center) / gmm.scale
    k = int(np.argmin(np.sum((gmm.means - target) ** 2, axis=1)))
    return float(gmm.weights[k]), k


@dataclass
class ValidationReport:
    ks: list
    corr_train: list
    corr_gen: list
    corr_max_diff: float
    acf_train: list
    acf_gen: list
    acf_max_diff: float
    gmm_weights: list
    defect_weight: float | None
    passed: dict

    def to_dict(self):
        return asdict(self)

    @property
    def ok(self):
        return all(self.passed.values())

    def summary(self):
        lines = []
        for i, name in enumerate(FEATURE_NAMES):
            lines.append(f"KS {name:8s} {self.ks[i]:.4f}  (limit {KS_LIMIT})")
        lines.append(f"max |corr diff|  {self.corr_max_diff:.4f}  (limit {CORR_LIMIT})")
        lines.append(f"max |lag-1 diff| {self.acf_max_diff:.4f}  (limit {ACF_LIMIT})")
        lines.append("refit weights   " + " ".join(f"{w:.4f}" for w in self.gmm_weights))
        if self.defect_weight is not None:
            lines.append(f"defect weight   {self.defect_weight:.4f}")
        for key, ok in self.passed.items():
            lines.append(f"{'PASS' if ok else 'FAIL'} {key}")
        return "\n".join(lines)


def compare(train_values, gen_values, k=3, seed=0, defect_mean=None, defect_weight=0.04):
    """Compare generated features against training features.

    Parameters
    ----------
    train_values, gen_values : arrays (N, M, 4)
    defect_mean : array (8,), optional
        Raw device-statistics mean of a known defect population. When given,
        a K-component mixture is refitted to the generated devices and the
        weight of the component nearest to it must be within 0.02 of
        ``defect_weight``.
    """
    ks = pooled_ks(train_values, gen_values)
    ct, cg = within_device_corr(train_values), within_device_corr(gen_values)
    at, ag = lag1_autocorr(train_values), lag1_autocorr(gen_values)
    refit = fit_gmm(dataset_stats(gen_values), k=k, seed=seed)
    passed = {
        "marginals": bool(np.all(ks < KS_LIMIT)),
        "correlation": bool(np.max(np.abs(ct - cg)) <= CORR_LIMIT),
        "autocorrelation": bool(np.max(np.abs(at - ag)) <= ACF_LIMIT),
    }
    dw = None
    if defect_mean is not None:
        dw, _ = component_weight_near(refit, defect_mean)
        passed["defect_weight"] = abs(dw - defect_weight) <= DEFECT_LIMIT
    return ValidationReport(
        ks=ks.tolist(), corr_train=ct.tolist(), corr_gen=cg.tolist(),
        corr_max_diff=float(np.max(np.abs(ct - cg))),
        acf_train=at.tolist(), acf_gen=ag.tolist(), acf_max_diff=float(np.max(np.abs(at - ag))),
        gmm_weights=refit.weights.tolist(), defect_weight=dw, passed=passed,
    )
