"""Per-channel feature statistics and the mean/std style injection transform.

A feature map is a ``torch.Tensor`` of shape (C, H, W).  A style is the pair
of per-channel mean and standard deviation vectors.  Injection re-normalizes
every channel of a source map to the target statistics:

    out[c] = sigma_t[c] * (f[c] - mu_s[c]) / sigma_s[c] + mu_t[c]

Standard deviations are population (divide by N) and floored at ``EPS_STYLE``
so the transform stays finite and differentiable on constant channels.
"""

from dataclasses import dataclass

import torch

from .errors import InvalidInputError, ShapeError

FeatureMap = torch.Tensor  # (C, H, W), any float dtype

EPS_STYLE = 1e-5
_EPS_SQ = EPS_STYLE * EPS_STYLE


@dataclass
class ChannelStyle:
    """Per-channel target statistics: ``mu`` and ``sigma``, both shape (C,)."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.ndim != 1 or self.sigma.ndim != 1:
            raise ShapeError("style vectors must be 1-D")
        if self.mu.shape[0] != self.sigma.shape[0]:
            raise ShapeError(
                f"mu has {self.mu.shape[0]} channels, sigma has {self.sigma.shape[0]}"
            )
        if self.mu.shape[0] == 0:
            raise InvalidInputError("style must cover at least one channel")

    @property
    def num_channels(self) -> int:
        return self.mu.shape[0]

    def validate(self) -> None:
        """Raise unless both vectors are finite and sigma is floored."""
        if not bool(torch.isfinite(self.mu).all()) or not bool(
            torch.isfinite(self.sigma).all()
        ):
            raise InvalidInputError("style contains non-finite values")
        if bool((self.sigma < EPS_STYLE).any()):
            raise InvalidInputError(f"sigma must be >= {EPS_STYLE}")

    def detach(self) -> "ChannelStyle":
        return ChannelStyle(self.mu.detach().clone(), self.sigma.detach().clone())

    def to(self, dtype: torch.dtype) -> "ChannelStyle":
        return ChannelStyle(self.mu.to(dtype), self.sigma.to(dtype))

    def to_json(self) -> dict:
        return {
            "mu": [float(v) for v in self.mu],
            "sigma": [float(v) for v in self.sigma],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChannelStyle":
        try:
            mu = torch.tensor([float(v) for v in obj["mu"]], dtype=torch.float32)
            sigma = torch.tensor([float(v) for v in obj["sigma"]], dtype=torch.float32)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed style record: {exc}") from exc
        style = cls(mu, sigma)
        style.validate()
        return style


def _check_feature_map(f: torch.Tensor) -> None:
    if not isinstance(f, torch.Tensor) or f.ndim != 3:
        raise ShapeError("feature map must be a (C, H, W) tensor")
    if f.numel() == 0:
        raise InvalidInputError("feature map must be non-empty")
    if not f.is_floating_point():
        raise InvalidInputError("feature map must have a float dtype")
    if not bool(torch.isfinite(f).all()):
        raise InvalidInputError("feature map contains non-finite values")


def batched_channel_stats(f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Population mean/std over spatial dims of a (B, C, H, W) batch.

    Returns (mu, sigma), each (B, C).  No input validation; internal hot path.
    """
    mu = f.mean(dim=(2, 3))
    var = (f - mu[:, :, None, None]).square().mean(dim=(2, 3))
    sigma = var.clamp_min(_EPS_SQ).sqrt().clamp_min(EPS_STYLE)
    return mu, sigma


def batched_style_apply(
    f: torch.Tensor, mu_t: torch.Tensor, sigma_t: torch.Tensor
) -> torch.Tensor:
    """Inject target statistics into a (B, C, H, W) batch.

    ``mu_t``/``sigma_t`` are (B, C) or (C,) and broadcast over the batch.
    Differentiable in ``f`` and in the targets.  No validation; internal.
    """
    mu_s, sigma_s = batched_channel_stats(f)
    if mu_t.ndim == 1:
        mu_t = mu_t[None, :]
        sigma_t = sigma_t[None, :]
    z = (f - mu_s[:, :, None, None]) / sigma_s[:, :, None, None]
    return sigma_t[:, :, None, None] * z + mu_t[:, :, None, None]


def channel_stats(f: FeatureMap) -> ChannelStyle:
    """Per-channel population mean and floored std of one feature map."""
    _check_feature_map(f)
    mu, sigma = batched_channel_stats(f[None])
    return ChannelStyle(mu[0], sigma[0])


def pgst_apply(f_s: FeatureMap, style_t: ChannelStyle) -> FeatureMap:
    """Return ``f_s`` re-normalized to the target style, shape preserved.

    Raises ShapeError when the style channel count does not match the map.
    """
    _check_feature_map(f_s)
    if style_t.num_channels != f_s.shape[0]:
        raise ShapeError(
            f"style covers {style_t.num_channels} channels, map has {f_s.shape[0]}"
        )
    out = batched_style_apply(
        f_s[None], style_t.mu.to(f_s.dtype), style_t.sigma.to(f_s.dtype)
    )
    return out[0]
