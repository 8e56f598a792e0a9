"""Experiment configuration: one INI file fully determines a run.

Parsing is strict and total: unknown sections or keys, or any malformed
value, raise ConfigError naming the offending [section] key. Every key has a
default, so a minimal file (even an empty one) is valid.
"""

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .degrade import DegradationSpec
from .errors import ConfigError
from .phantoms import PhantomRecipe
from .solver import SolverConfig
from .tomo import FILTER_KINDS

MODES = ("unimodal", "crossmodal")


def _to_int(s):
    return int(s)


def _to_float(s):
    return float(s)


def _to_bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _to_str(s):
    return s.strip()


def _list_of(conv):
    def parse(s):
        items = [p.strip() for p in s.split(",") if p.strip()]
        return [conv(p) for p in items]
    return parse


def _positive(v):
    if v <= 0:
        raise ValueError("must be positive")


def _non_negative(v):
    if v < 0:
        raise ValueError("must be >= 0")


def _fraction(v):
    if not 0.0 <= v <= 1.0:
        raise ValueError("must be in [0, 1]")


def _choice(options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {options}")
    return check


def _choices(options):
    def check(vs):
        for v in vs:
            if v not in options:
                raise ValueError(f"{v!r} not one of {options}")
        if not vs:
            raise ValueError("list must not be empty")
    return check


def _non_empty(vs):
    if not vs:
        raise ValueError("list must not be empty")


# key -> (converter, default, validator | None)
SCHEMA = {
    "experiment": {
        "name": (_to_str, "desk", None),
        "seed": (_to_int, 1234, _non_negative),
        "out_dir": (_to_str, "xmct-out", None),
    },
    "phantoms": {
        "volume_side": (_to_int, 64, _positive),
        "depth": (_to_int, 32, _positive),
        "ellipse_count_min": (_to_int, 8, _non_negative),
        "ellipse_count_max": (_to_int, 14, _positive),
        "attenuation_low": (_to_float, 0.25, _fraction),
        "attenuation_high": (_to_float, 0.95, _fraction),
        "attenuation_correlation": (_to_float, 0.6, _fraction),
        "visibility_both": (_to_float, 0.7, _fraction),
        "visibility_main_only": (_to_float, 0.15, _fraction),
        "visibility_aux_only": (_to_float, 0.15, _fraction),
    },
    "data": {
        "train_volumes": (_to_int, 10, _non_negative),
        "test_volumes": (_to_int, 3, _non_negative),
        "pair_count": (_to_int, 192, _non_negative),
        "prior_slices": (_to_int, 400, _non_negative),
        "view_budget": (_to_int, 256, _positive),
    },
    "geometry": {
        "pixel_pitch": (_to_float, 1.0, _positive),
        "detector_pitch": (_to_float, 1.0, _positive),
    },
    "schedule": {
        "timesteps": (_to_int, 1000, _positive),
        "beta_start": (_to_float, 1e-4, _positive),
        "beta_end": (_to_float, 0.02, _positive),
    },
    "prior": {
        "base_channels": (_to_int, 12, _positive),
        "levels": (_to_int, 3, _positive),
        "emb_dim": (_to_int, 24, _positive),
        "epochs": (_to_int, 15, _non_negative),
        "batch": (_to_int, 4, _positive),
        "lr": (_to_float, 1e-3, _non_negative),
        "momentum": (_to_float, 0.0, _fraction),
        "grad_clip": (_to_float, 5.0, _non_negative),
    },
    "xmodal": {
        "base_channels": (_to_int, 16, _positive),
        "epochs": (_to_int, 25, _non_negative),
        "batch": (_to_int, 8, _positive),
        "lr": (_to_float, 0.03, _non_negative),
        "momentum": (_to_float, 0.0, _fraction),
        "adversarial_weight": (_to_float, 0.0, _non_negative),
        "grad_clip": (_to_float, 1.0, _non_negative),
        "val_fraction": (_to_float, 0.15, _fraction),
    },
    "aux": {
        "views": (_to_int, 64, _positive),
        "noise": (_to_float, 0.05, _non_negative),
        "blur": (_to_float, 1.0, _non_negative),
        "keep": (_to_float, 1.0, _fraction),
    },
    "solver": {
        "t_prime": (_to_int, 10, _positive),
        "adapt_lr": (_to_float, 1e-3, _non_negative),
        "minibatch_k": (_to_int, 4, _positive),
        "inner_dc_steps": (_to_int, 5, _non_negative),
        "dc_step_scale": (_to_float, 1.0, _positive),
        "grad_clip_norm": (_to_float, 10.0, _non_negative),
        "crossmodal_period": (_to_int, 2, _positive),
        "crossmodal_min_t": (_to_int, 2, _non_negative),
        "fbp_filter": (_to_str, "hann", _choice(FILTER_KINDS)),
        "predict_chunk": (_to_int, 8, _positive),
    },
    "sweep": {
        "views": (_list_of(_to_int), [8, 16, 32], _non_empty),
        "steps": (_list_of(_to_int), [10], _non_empty),
        "noise": (_list_of(_to_float), [0.0], _non_empty),
        "modes": (_list_of(_to_str), ["unimodal", "crossmodal"], _choices(MODES)),
    },
}


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    out_dir: Path
    recipe: PhantomRecipe
    raw: dict = field(repr=False, default_factory=dict)

    def __getitem__(self, section):
        return self.raw[section]

    @property
    def aux_spec(self) -> DegradationSpec:
        a = self.raw["aux"]
        return DegradationSpec(a["views"], a["noise"], a["blur"], a["keep"])

    @property
    def ideal_spec(self) -> DegradationSpec:
        return DegradationSpec(self.raw["data"]["view_budget"])

    def solver_config(self, num_adapt_steps, crossmodal_enabled, seed) -> SolverConfig:
        s = self.raw["solver"]
        return SolverConfig(
            t_prime=s["t_prime"], num_adapt_steps=num_adapt_steps,
            adapt_lr=s["adapt_lr"], minibatch_k=s["minibatch_k"],
            inner_dc_steps=s["inner_dc_steps"], dc_step_scale=s["dc_step_scale"],
            grad_clip_norm=s["grad_clip_norm"],
            crossmodal_enabled=crossmodal_enabled,
            crossmodal_period=s["crossmodal_period"],
            crossmodal_min_t=s["crossmodal_min_t"], fbp_filter=s["fbp_filter"],
            predict_chunk=s["predict_chunk"], seed=seed)

    @property
    def prior_arch(self) -> dict:
        p = self.raw["prior"]
        return {"kind": "denoiser", "base": p["base_channels"],
                "levels": p["levels"], "emb_dim": p["emb_dim"], "in_ch": 1}

    @property
    def xmodal_arch(self) -> dict:
        return {"kind": "translator", "base": self.raw["xmodal"]["base_channels"],
                "in_ch": 2}


def _parse_sections(cp: configparser.ConfigParser) -> dict:
    raw = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"[{section}]: unknown section")
    for section, keys in SCHEMA.items():
        values = {}
        present = cp[section] if cp.has_section(section) else {}
        for key in present:
            if key not in keys:
                raise ConfigError(f"[{section}] {key}: unknown key")
        for key, (conv, default, check) in keys.items():
            if key in present:
                text = present[key]
                try:
                    value = conv(text)
                    if check is not None:
                        check(value)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"[{section}] {key}: {exc} (got {text!r})") from None
            else:
                value = default
            values[key] = value
        raw[section] = values
    return raw


def _cross_validate(raw):
    ph = raw["phantoms"]
    if ph["ellipse_count_max"] < ph["ellipse_count_min"]:
        raise ConfigError("[phantoms] ellipse_count_max: must be >= ellipse_count_min")
    if ph["attenuation_high"] < ph["attenuation_low"]:
        raise ConfigError("[phantoms] attenuation_high: must be >= attenuation_low")
    if ph["volume_side"] % 4 != 0:
        raise ConfigError("[phantoms] volume_side: must be divisible by 4 "
                          "(network downsampling)")
    if sum((ph["visibility_both"], ph["visibility_main_only"],
            ph["visibility_aux_only"])) <= 0:
        raise ConfigError("[phantoms] visibility_both: weights must sum to > 0")
    sc = raw["schedule"]
    if not sc["beta_start"] <= sc["beta_end"] < 1.0:
        raise ConfigError("[schedule] beta_end: need beta_start <= beta_end < 1")
    if raw["solver"]["minibatch_k"] > ph["depth"]:
        raise ConfigError("[solver] minibatch_k: exceeds phantom depth")
    budget = raw["data"]["view_budget"]
    for v in raw["sweep"]["views"]:
        if v < 2 or v > budget:
            raise ConfigError(f"[sweep] views: {v} outside [2, view_budget={budget}]")
    if raw["aux"]["views"] > budget:
        raise ConfigError("[aux] views: exceeds view_budget")


def config_from_raw(raw, seed_override=None, out_override=None) -> ExperimentConfig:
    _cross_validate(raw)
    exp = raw["experiment"]
    seed = exp["seed"] if seed_override is None else int(seed_override)
    out_dir = Path(exp["out_dir"] if out_override is None else out_override)
    ph = raw["phantoms"]
    recipe = PhantomRecipe(
        volume_side=ph["volume_side"], depth=ph["depth"],
        ellipse_count_range=(ph["ellipse_count_min"], ph["ellipse_count_max"]),
        attenuation_main_range=(ph["attenuation_low"], ph["attenuation_high"]),
        attenuation_aux_range=(ph["attenuation_low"], ph["attenuation_high"]),
        attenuation_correlation=ph["attenuation_correlation"],
        visibility_weights=(ph["visibility_both"], ph["visibility_main_only"],
                            ph["visibility_aux_only"]),
        seed=seed)
    return ExperimentConfig(name=exp["name"], seed=seed, out_dir=out_dir,
                            recipe=recipe, raw=raw)


def parse_config(path, seed_override=None, out_override=None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = _parse_sections(cp)
    return config_from_raw(raw, seed_override, out_override)


def default_config(seed=1234, out_dir="xmct-out", **overrides) -> ExperimentConfig:
    """Programmatic config with schema defaults; overrides are
    {section: {key: value}} and are validated like file input."""
    raw = {section: {k: v[1] for k, v in keys.items()}
           for section, keys in SCHEMA.items()}
    for section, kv in overrides.items():
        if section not in raw:
            raise ConfigError(f"[{section}]: unknown section")
        for k, v in kv.items():
            if k not in raw[section]:
                raise ConfigError(f"[{section}] {k}: unknown key")
            raw[section][k] = v
    raw["experiment"]["seed"] = seed
    raw["experiment"]["out_dir"] = str(out_dir)
    return config_from_raw(raw)
