"""Small shared fixtures for the training tests."""
import numpy as np

from distdpo.diffusion import build_schedule
from distdpo.distill import TrainState, generate
from distdpo.net import Architecture, encode_context, init_params
from distdpo.pointcloud import SceneRecipe, replicate_scan, synth_scene

TINY = Architecture(hidden=(8, 8), time_width=4)
TINY_RECIPE = SceneRecipe(n_gt=48, n_sparse=6)


def tiny_sched(T=10):
    return build_schedule(T)


def tiny_scene(seed=0):
    return synth_scene(TINY_RECIPE, seed)


def random_state(seed=0, arch=TINY, scale=1.0):
    """Student, assistants and teacher all distinct."""
    nets = [init_params(arch, seed * 10 + i, out_scale=scale) for i in range(4)]
    return TrainState(nets[0], nets[1], nets[2], nets[3], rng=np.random.default_rng(seed))


def regenerate(params, scene, cfg, sched, seed, steps, lam):
    """Repeat the generation inside make_preference_pair for one half."""
    rng = np.random.default_rng(seed)
    p_star = replicate_scan(scene.sparse, cfg.K)
    eps_T = rng.standard_normal(p_star.shape)
    z_seed = int(rng.integers(2 ** 63))
    x, _ = generate(params, encode_context(scene.sparse), sched, steps, eps_T, p_star, lam,
                    cfg.variant, cfg.deterministic, np.random.default_rng(z_seed), record=False)
    return x
