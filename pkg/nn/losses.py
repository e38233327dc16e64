"""
Pertes différentiables: Tversky, focal-Tversky, entropie croisée binaire (simple et équilibrée).

Les sommes portent sur tous les pixels du lot (un seul ratio par lot).
"""
from typing import Optional

import numpy as np

from config import settings
from models import LossName, LossParams
from nn.tensor import Tensor, clamp, div, log, mean, mul, power, sub, sum_

def _targets(y, yhat: Tensor) -> Tensor:
    data = y.data if isinstance(y, Tensor) else np.asarray(y)
    if data.shape != yhat.shape:
        raise ValueError(f"Formes incompatibles: vérité {data.shape}, prédiction {yhat.shape}")
    return Tensor(data, dtype=yhat.dtype)

def _check_beta(beta: float) -> None:
    if not 0 < beta < 1:
        raise ValueError(f"beta doit être dans (0,1), reçu {beta}")

def tversky_index(y, yhat: Tensor, beta: float = 0.7) -> Tensor:
    """TI = TP / (TP + beta*FP + (1-beta)*FN) en version souple"""
    _check_beta(beta)
    y = _targets(y, yhat)
    tp = sum_(mul(y, yhat))
    fp = sum_(mul(sub(1.0, y), yhat))
    fn = sum_(mul(y, sub(1.0, yhat)))
    return div(tp, tp + mul(fp, beta) + mul(fn, 1.0 - beta))

def tversky_loss(y, yhat: Tensor, beta: float = 0.7) -> Tensor:
    return -tversky_index(y, yhat, beta)

def focal_tversky_loss(y, yhat: Tensor, beta: float = 0.7, gamma: float = 0.75) -> Tensor:
    """(1 - TI)^gamma"""
    if gamma <= 0:
        raise ValueError(f"gamma doit être positif, reçu {gamma}")
    gap = clamp(sub(1.0, tversky_index(y, yhat, beta)), lo=0.0)
    return power(gap, gamma)

def _bce_terms(y: Tensor, yhat: Tensor):
    p = clamp(yhat, settings.PROB_EPS, 1 - settings.PROB_EPS)
    return mul(y, log(p)), mul(sub(1.0, y), log(sub(1.0, p)))

def bce_loss(y, yhat: Tensor) -> Tensor:
    y = _targets(y, yhat)
    pos, neg = _bce_terms(y, yhat)
    return -mean(pos + neg)

def balanced_bce_loss(y, yhat: Tensor, beta: float = 0.5) -> Tensor:
    _check_beta(beta)
    y = _targets(y, yhat)
    pos, neg = _bce_terms(y, yhat)
    return -mean(mul(pos, beta) + mul(neg, 1.0 - beta))

def soft_dice(y, yhat: Tensor) -> Tensor:
    """2 Σ y ŷ / (Σ y + Σ ŷ)"""
    y = _targets(y, yhat)
    return div(mul(sum_(mul(y, yhat)), 2.0), sum_(y) + sum_(yhat))

def compute_loss(name: LossName, y, yhat: Tensor, params: Optional[LossParams] = None) -> Tensor:
    params = params or LossParams()
    name = LossName(name)
    if name == LossName.BCE:
        return bce_loss(y, yhat)
    if name == LossName.BALANCED_BCE:
        return balanced_bce_loss(y, yhat, params.beta_for(name))
    if name == LossName.TVERSKY:
        return tversky_loss(y, yhat, params.beta_for(name))
    return focal_tversky_loss(y, yhat, params.beta_for(name), params.gamma)
