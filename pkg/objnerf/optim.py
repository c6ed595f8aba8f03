from typing import Any, Callable, Iterable, NamedTuple, Optional, Tuple

import torch


class AdamState(NamedTuple):
    step: int
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor

    @classmethod
    def zeros_like(cls, param: torch.Tensor) -> "AdamState":
        return cls(0, torch.zeros_like(param), torch.zeros_like(param))


def adam_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> Tuple[torch.Tensor, AdamState]:
    """
    One bias-corrected Adam update. Pure: returns new tensors and leaves the inputs untouched.
    """
    assert param.shape == grad.shape, f"Shape mismatch: {param.shape} != {grad.shape}"
    step = state.step + 1
    exp_avg = beta1 * state.exp_avg + (1.0 - beta1) * grad
    exp_avg_sq = beta2 * state.exp_avg_sq + (1.0 - beta2) * grad * grad
    m_hat = exp_avg / (1.0 - beta1**step)
    v_hat = exp_avg_sq / (1.0 - beta2**step)
    new_param = param - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return new_param, AdamState(step, exp_avg, exp_avg_sq)


def decay_factor(lr_start: float, lr_end: float, n_steps: int) -> float:
    """Per-step multiplier taking the learning rate from ``lr_start`` at the first step to ``lr_end`` at the last."""
    if n_steps <= 1 or lr_start == lr_end:
        return 1.0
    return float((lr_end / lr_start) ** (1.0 / (n_steps - 1)))


class AnnealedAdam(torch.optim.Optimizer):
    """
    Adam whose parameter groups each multiply their learning rate by ``lr_decay`` after
    every step.
    """

    def __init__(
        self,
        params: Iterable[Any],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.99),
        eps: float = 1e-9,
        lr_decay: float = 1.0,
    ):
        defaults = dict(lr=lr, betas=betas, eps=eps, lr_decay=lr_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure: Optional[Callable[[], float]] = None) -> Optional[float]:  # type: ignore
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                current = state.get("adam", AdamState.zeros_like(p))
                new_p, state["adam"] = adam_step(
                    p, p.grad, current, group["lr"], beta1, beta2, group["eps"]
                )
                p.copy_(new_p)
            group["lr"] *= group["lr_decay"]
        return loss
