import numpy as np


class Adam:
    """Adam with bias correction, updating a list of arrays in place.

    Parameters
    ----------
    params : list of np.ndarray
        arrays that will be modified by :meth:`step`
    lr : float
        default learning rate; :meth:`step` accepts a per-call override
    betas : tuple of float
        decay rates of the first and second moment estimates
    eps : float
        added to the denominator for numerical stability
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bias_correction_1 = 1 - self.beta1**self.t
        bias_correction_2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / bias_correction_1) / (np.sqrt(v / bias_correction_2) + self.eps)
