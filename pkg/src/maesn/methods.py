"""Method definitions shared by the meta-trainer, baselines and CLI."""

from __future__ import annotations

from dataclasses import dataclass, asdict

METHODS = ("maesn", "maml", "latent_only", "scratch", "maml_bias_all", "maml_bias_only")


@dataclass
class MethodConfig:
    """What is sampled, what the inner loop adapts, and what is meta-learned.

    ====================  =========  ===================  ==========  ====
    method                latent     inner loop adapts    step sizes  KL
    ====================  =========  ===================  ==========  ====
    maesn                 sampled    latent (+theta opt)  learned     yes
    latent_only           sampled    nothing (training)   --          yes
    maml                  none       theta                fixed       no
    maml_bias_all         bias       bias + theta         learned     no
    maml_bias_only        bias       bias                 learned     no
    scratch               none       --                   --          no
    ====================  =========  ===================  ==========  ====
    """

    method: str = "maesn"
    latent_dim: int = 2
    hidden_sizes: tuple[int, ...] = (100, 100)
    include_theta: bool = False
    stagewise_theta_iter: int | None = None  # turn the theta inner update on at this iteration
    kl_weight: float = 1.0
    alpha_init: float = 0.1
    alpha_sigma_init: float | None = None  # defaults to alpha_init
    alpha_theta_init: float | None = None
    inner_steps: int = 1
    latent_grad: str = "reparam"  # or "likelihood_ratio"
    first_order: bool = False
    init_log_std: float = 0.0
    normalize_advantages: bool = True
    baseline: str = "time_mean"
    gamma: float = 1.0
    metatest_step: str | float = "learned"  # "learned" or a fixed scalar
    metatest_normalize: bool | None = None  # advantage normalization at meta-test; None follows training

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.latent_grad not in ("reparam", "likelihood_ratio"):
            raise ValueError(f"latent_grad must be 'reparam' or 'likelihood_ratio', got {self.latent_grad!r}")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.latent_kind != "none" and self.latent_dim < 1:
            raise ValueError(f"{self.method} needs latent_dim >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")

    @property
    def latent_kind(self) -> str:
        if self.method in ("maesn", "latent_only"):
            return "sampled"
        if self.method in ("maml_bias_all", "maml_bias_only"):
            return "bias"
        return "none"

    @property
    def policy_latent_dim(self) -> int:
        return 0 if self.latent_kind == "none" else self.latent_dim

    @property
    def has_inner_update(self) -> bool:
        return self.method not in ("latent_only", "scratch")

    @property
    def adapt_latent(self) -> bool:
        return self.method in ("maesn", "maml_bias_all", "maml_bias_only")

    def adapt_theta(self, iteration: int | None = None) -> bool:
        if self.method in ("maml", "maml_bias_all"):
            return True
        if self.method != "maesn":
            return False
        if self.stagewise_theta_iter is not None and iteration is not None:
            return iteration >= self.stagewise_theta_iter
        return self.include_theta

    @property
    def learned_steps(self) -> bool:
        return self.method in ("maesn", "maml_bias_all", "maml_bias_only")

    @property
    def theta_step(self) -> float:
        """Fixed inner step on theta for methods that do not learn it (MAML)."""
        return self.alpha_init if self.alpha_theta_init is None else self.alpha_theta_init

    @property
    def metatest_normalizes(self) -> bool:
        return self.normalize_advantages if self.metatest_normalize is None else self.metatest_normalize

    @property
    def uses_kl(self) -> bool:
        return self.latent_kind == "sampled"

    @property
    def latent_mode(self) -> str:
        """How the latent enters the graph (see ``estimators.latent_episodes``)."""
        if self.latent_kind == "sampled":
            return self.latent_grad
        if self.latent_kind == "bias":
            return "bias"
        return "none"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d
