"""Near-isometric point-pattern matching with loop-of-cliques models."""

from .assign import solve_lap
from .bench import ExperimentConfig, SyntheticConfig, gen_synthetic, house_pairs, run_experiment
from .core import (
    Assignment,
    FeatureConfig,
    FormatError,
    MatchInstance,
    Scene,
    TemplateShape,
    WeightModel,
    load_matches,
    load_model,
    load_scene,
    load_template,
    save_matches,
    save_model,
    save_scene,
    save_template,
)
from .features import ShapeContextConfig, delaunay, shape_contexts, with_shape_context
from .infer import CliqueTableSet, map_bruteforce, map_conditioned, map_loopy
from .learn import TrainConfig, predict_higher, predict_linear, train_two_stage

__version__ = "0.1.0"
