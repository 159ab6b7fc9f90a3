"""Experiment configuration: YAML files validated against a pydantic schema, with presets."""

import hashlib
import json
import logging
import os
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
import yaml

from safe_mpcrl.env import DoubleIntegrator, LinearMotion, Obstacle, StageCostWeights, World
from safe_mpcrl.mpc import MpcConfig
from safe_mpcrl.nlp import SolverConfig
from safe_mpcrl.preset_registry import SAFE_MPCRL_PRESETS, deep_merge
from safe_mpcrl.trainer import NoiseSchedule, TrainerConfig

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "SAFE_MPCRL_OUTPUT_DIR"


class ConfigError(ValueError):
    """Base class of every configuration problem."""


class ConfigParseError(ConfigError):
    """The file is not valid YAML (or is empty).

    Attributes
    ----------
    line, column : int
        The 1-based position of the problem.
    """

    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ConfigSchemaError(ConfigError):
    """The document does not match the schema.

    Attributes
    ----------
    fields : list of str
        The dotted paths of the offending fields.
    """

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)


class PresetConflictError(ConfigError):
    """A config overrides a value that defines its preset."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MotionModel(_Strict):
    """Back-and-forth horizontal motion of an obstacle."""

    x_min: float
    x_max: float
    speed: float = Field(default=0.2, ge=0.0)
    direction: Literal[1, -1] = 1


class ObstacleModel(_Strict):
    """A circular obstacle."""

    center: tuple[float, float]
    radius: float = Field(gt=0.0)
    motion: MotionModel | None = None


class WorldModel(_Strict):
    """The plant, the obstacles and the boxes."""

    dt: float = Field(default=0.2, gt=0.0)
    obstacles: list[ObstacleModel] = Field(min_length=1)
    state_bound: float = Field(default=5.0, gt=0.0)
    action_bound: float = Field(default=1.0, gt=0.0)
    start_state: tuple[float, float, float, float] = (-5.0, -5.0, 0.0, 0.0)


class MpcModel(_Strict):
    """The MPC problem settings."""

    horizon: int = Field(default=1, ge=1)
    w_mpc: float = Field(default=20.0**6, gt=0.0)
    zeta: float = Field(default=1.0, gt=0.0, le=1.0)
    q_diag: list[float] = Field(default_factory=lambda: [10.0] * 4, min_length=4, max_length=4)
    r_diag: list[float] = Field(default_factory=lambda: [1.0] * 2, min_length=2, max_length=2)
    f_init: float = Field(default=100.0, gt=0.0)
    f_lower: float = Field(default=1e-3, gt=0.0)
    state_bounds: Literal["soft", "hard"] = "soft"
    dump_problems: bool = False


class LodModel(_Strict):
    """Initialization of the optimal-decay parameters."""

    omega_bar_init: float = 1000.0
    p_omega_init: float = Field(default=0.4, ge=0.0)
    omega_bar_upper: float = Field(default=1000.0, gt=0.0)
    init: Literal["literal", "swapped"] = "literal"


class NetworkModel(_Strict):
    """Shape and initialization of the decay networks."""

    hidden: list[int] = Field(default_factory=lambda: [16, 16, 16])
    output_decay: float = Field(default=0.9, gt=0.0, lt=1.0)
    spectral_radius: float = Field(default=0.5, ge=0.0)
    context: Literal["forecast", "none"] = "forecast"
    normalize: bool = True

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value):
        if any(w < 1 for w in value):
            raise ValueError("hidden widths must be positive")
        return value


class SolverModel(_Strict):
    """NLP solver settings."""

    tol: float = Field(default=1e-6, gt=0.0)
    max_iter: int = Field(default=200, ge=1)
    method: Literal["ipopt", "sqp"] = "sqp"
    hessian: Literal["exact", "bfgs"] = "bfgs"
    regularization: float = Field(default=1e-9, ge=0.0)
    warm_start: bool = True
    iteration_log: bool = False


class TrainerModel(_Strict):
    """Q-learning settings."""

    n_episodes: int = Field(default=500, ge=0)
    episode_length: int = Field(default=60, ge=1)
    zeta: float = Field(default=0.99, ge=0.0, le=1.0)
    w_rl: float = Field(default=1e3, ge=0.0)
    learning_rate: float = Field(default=1e-3, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps_adam: float = Field(default=1e-8, gt=0.0)
    buffer_capacity: int | None = Field(default=None, ge=1)
    noise_std: float = Field(default=0.5, ge=0.0)
    noise_decay: float = Field(default=0.99, gt=0.0, le=1.0)
    failure_limit: int = Field(default=5, ge=0)
    max_failure_rate: float = Field(default=0.1, ge=0.0, le=1.0)


class ExperimentConfig(_Strict):
    """A complete experiment.

    Attributes
    ----------
    preset : str or None
        The preset the document was merged over.
    variant : str
        ``"lod"``, ``"nn"`` or ``"rnn"``.
    world, mpc, lod, network, solver, trainer
        The section models.
    seed : int
        Seeds parameter initialization and exploration noise.
    output_dir : str
        Where result files go.
    """

    preset: str | None = None
    variant: Literal["lod", "nn", "rnn"]
    world: WorldModel
    mpc: MpcModel = Field(default_factory=MpcModel)
    lod: LodModel = Field(default_factory=LodModel)
    network: NetworkModel = Field(default_factory=NetworkModel)
    solver: SolverModel = Field(default_factory=SolverModel)
    trainer: TrainerModel = Field(default_factory=TrainerModel)
    seed: int = 0
    output_dir: str = "results"

    @model_validator(mode="after")
    def _check_motion(self):
        for i, ob in enumerate(self.world.obstacles):
            if ob.motion is not None and not (ob.motion.x_min <= ob.center[0] <= ob.motion.x_max):
                raise ValueError(f"obstacle {i}: center outside its motion segment")
        return self

    def build_world(self):
        """The World described by the config."""
        obstacles = []
        for ob in self.world.obstacles:
            motion = None
            if ob.motion is not None:
                motion = LinearMotion(ob.motion.x_min, ob.motion.x_max, ob.motion.speed, ob.motion.direction)
            obstacles.append(Obstacle(ob.center[0], ob.center[1], ob.radius, motion))
        return World(
            plant=DoubleIntegrator(self.world.dt),
            obstacles=tuple(obstacles),
            state_bound=self.world.state_bound,
            action_bound=self.world.action_bound,
        )

    def solver_config(self, out_dir=None):
        """The NLP solver settings (iteration log under ``out_dir`` when enabled)."""
        log_path = None
        if self.solver.iteration_log:
            log_path = os.path.join(out_dir or self.output_dir, "nlp_iterations.jsonl")
        return SolverConfig(
            tol=self.solver.tol,
            max_iter=self.solver.max_iter,
            method=self.solver.method,
            hessian=self.solver.hessian,
            regularization=self.solver.regularization,
            warm_start=self.solver.warm_start,
            iteration_log=log_path,
        )

    def mpc_config(self, out_dir=None):
        """The MpcConfig described by the config."""
        omega_bar, p_omega = self.lod.omega_bar_init, self.lod.p_omega_init
        if self.lod.init == "swapped":
            omega_bar, p_omega = p_omega, omega_bar
        dump_path = None
        if self.mpc.dump_problems:
            dump_path = os.path.join(out_dir or self.output_dir, "mpc_problems.jsonl")
        return MpcConfig(
            horizon=self.mpc.horizon,
            variant=self.variant,
            w_mpc=self.mpc.w_mpc,
            weights=StageCostWeights.from_diagonals(self.mpc.q_diag, self.mpc.r_diag),
            zeta=self.mpc.zeta,
            state_bounds=self.mpc.state_bounds,
            f_init=self.mpc.f_init,
            f_lower=self.mpc.f_lower,
            omega_bar_init=omega_bar,
            p_omega_init=p_omega,
            omega_bar_upper=self.lod.omega_bar_upper,
            hidden=tuple(self.network.hidden),
            output_decay=self.network.output_decay,
            spectral_radius=self.network.spectral_radius,
            context=self.network.context,
            normalize=self.network.normalize,
            solver=self.solver_config(out_dir),
            dump_path=dump_path,
        )

    def trainer_config(self, log_path=None):
        """The TrainerConfig described by the config."""
        t = self.trainer
        return TrainerConfig(
            zeta=t.zeta,
            w_rl=t.w_rl,
            learning_rate=t.learning_rate,
            beta1=t.beta1,
            beta2=t.beta2,
            eps_adam=t.eps_adam,
            buffer_capacity=t.buffer_capacity,
            n_episodes=t.n_episodes,
            episode_length=t.episode_length,
            start_state=tuple(self.world.start_state),
            noise=NoiseSchedule(std0=t.noise_std, decay=t.noise_decay, seed=self.seed + 1),
            failure_limit=t.failure_limit,
            log_path=log_path,
        )

    def config_hash(self):
        """A SHA-256 digest of the canonical config (output directory excluded)."""
        document = self.model_dump(mode="json", exclude={"output_dir"})
        canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_config_text(text, source="<string>"):
    """Parse YAML text into a mapping, reporting positions of syntax errors.

    Parameters
    ----------
    text : str
        The YAML document.
    source : str
        A label for error messages.

    Returns
    -------
    dict
        The parsed document.
    """
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = 1 if mark is None else mark.line + 1
        column = 1 if mark is None else mark.column + 1
        problem = getattr(err, "problem", None) or str(err)
        raise ConfigParseError(f"{source}: {problem}", line, column) from err

    if document is None:
        raise ConfigParseError(f"{source}: the configuration is empty", 1, 1)
    if not isinstance(document, dict):
        raise ConfigParseError(f"{source}: expected a mapping at the top level", 1, 1)
    return document


def expand_preset(document, registry=None):
    """Merge a document over its preset (if it names one).

    Raises
    ------
    UnknownPresetError
        If the preset is not registered.
    PresetConflictError
        If the document sets a different variant than its preset.
    """
    registry = SAFE_MPCRL_PRESETS if registry is None else registry
    name = document.get("preset")
    if name is None:
        return document

    preset = registry.get_values(name)
    variant = document.get("variant")
    if variant is not None and variant != preset["variant"]:
        raise PresetConflictError(
            f"preset {name!r} defines variant {preset['variant']!r} but the config sets {variant!r}"
        )
    return deep_merge(preset, document)


def validate_config(document):
    """Validate a merged document against the schema."""
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as err:
        fields = [".".join(str(part) for part in e["loc"]) for e in err.errors()]
        details = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in err.errors())
        raise ConfigSchemaError(f"invalid configuration: {details}", fields) from err


def load_config(path, environ=None):
    """Load, expand and validate an experiment config file.

    Parameters
    ----------
    path : str
        The YAML file.
    environ : dict, optional
        The environment (``os.environ`` when omitted); ``SAFE_MPCRL_OUTPUT_DIR`` overrides the
        output directory.

    Returns
    -------
    ExperimentConfig
        The validated config with defaults filled in.
    """
    environ = os.environ if environ is None else environ
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()

    document = expand_preset(parse_config_text(text, source=str(path)))
    if environ.get(OUTPUT_DIR_ENV):
        document["output_dir"] = environ[OUTPUT_DIR_ENV]
    cfg = validate_config(document)
    logger.debug(f"Loaded {path} ({cfg.variant}, preset {cfg.preset}).")
    return cfg
