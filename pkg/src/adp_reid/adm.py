"""Attention Disturbance Mask: a shared, adversarially updated noise canvas."""
from __future__ import annotations

import torch


def disturbance_loss(trace: torch.Tensor, patch_mask: torch.Tensor) -> torch.Tensor:
    """Class-token attention mass on occluded patches, averaged over blocks and heads.

    ``trace`` is ``B x depth x heads x (N+1)`` (index 0 is the class token),
    ``patch_mask`` is ``B x N`` (or ``N``) fractional coverage. The result is
    additionally averaged over the batch and lies in [0, 1].
    """
    if patch_mask.dim() == 1:
        patch_mask = patch_mask.unsqueeze(0).expand(trace.shape[0], -1)
    if trace.shape[-1] != patch_mask.shape[-1] + 1 or trace.shape[0] != patch_mask.shape[0]:
        raise ValueError(
            f"trace {tuple(trace.shape)} and patch mask {tuple(patch_mask.shape)} come from different grids"
        )
    mass = (trace[..., 1:] * patch_mask[:, None, None, :].to(trace.dtype)).sum(dim=-1)
    return mass.mean()


class NoiseCanvas:
    """Image-shaped learnable noise with its own momentum optimizer.

    Values are kept in [-1, 1] and added to pixels in [0, 1] inside the
    occluder mask.
    """

    def __init__(self, shape, lr: float = 0.04, momentum: float = 0.9, init_std: float = 0.1,
                 generator: torch.Generator | None = None):
        values = torch.randn(shape, generator=generator) * init_std
        self.values = torch.nn.Parameter(values.clamp_(-1.0, 1.0))
        self.optimizer = torch.optim.SGD([self.values], lr=lr, momentum=momentum)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = value

    def state_dict(self) -> dict:
        return {"values": self.values.detach().clone(), "optimizer": self.optimizer.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        with torch.no_grad():
            self.values.copy_(state["values"])
        self.optimizer.load_state_dict(state["optimizer"])


def adm_step(canvas: NoiseCanvas, grad: torch.Tensor) -> NoiseCanvas:
    """Ascend the disturbance loss: descend on its negation, then project to [-1, 1]."""
    if grad.shape != canvas.values.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != canvas shape {tuple(canvas.values.shape)}")
    canvas.optimizer.zero_grad(set_to_none=True)
    canvas.values.grad = -grad.detach().clone()
    canvas.optimizer.step()
    with torch.no_grad():
        canvas.values.clamp_(-1.0, 1.0)
    canvas.values.grad = None
    return canvas


def canvas_gradient(loss: torch.Tensor, canvas: NoiseCanvas) -> torch.Tensor:
    """Gradient of ``loss`` w.r.t. the canvas only; network parameters accumulate nothing."""
    (grad,) = torch.autograd.grad(loss, canvas.values)
    return grad
