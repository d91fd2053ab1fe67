import torch


class ValidationError(ValueError):
    """Raised when an input violates a shape, dtype or finiteness contract."""


def check_feature_map(x: torch.Tensor, name: str = "x") -> torch.Tensor:
    """Require a finite (B, C, H, W) tensor."""
    if not isinstance(x, torch.Tensor):
        raise ValidationError(f"{name} must be a tensor, got {type(x).__name__}")
    if x.dim() != 4:
        raise ValidationError(f"{name} must be (B, C, H, W), got shape {tuple(x.shape)}")
    if min(x.shape[1:]) < 1:
        raise ValidationError(f"{name} has an empty dimension: {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")
    return x


def check_same_spatial(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValidationError(
            f"{what}: spatial shapes differ {tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}"
        )
