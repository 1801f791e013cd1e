"""Baseline-policy preparation and policy evaluation."""

from __future__ import annotations

import dataclasses

import numpy as np

from .algorithms import AlgoConfig, train
from .config import BaselineBlock, BaselineRecipe
from .envs import CMDPEnv, rollout
from .estimation import divergence_stream, episode_mean_return
from .persist import load_checkpoint
from .policy import GaussianPolicy


def recipe_config(recipe: BaselineRecipe, algo: AlgoConfig) -> AlgoConfig:
    """PCPO settings for a baseline: cost at h_c_b (default 0), reward without the cost constraint, near at h_c."""
    if recipe.h_c_b is not None:
        h_c = recipe.h_c_b
    else:
        h_c = 0.0 if recipe.variant == "cost" else algo.h_c
    return dataclasses.replace(
        algo, algo="PCPO", h_c=h_c, use_cost=recipe.variant != "reward", n_iters=recipe.iters,
        seed=recipe.seed, delta=recipe.delta or algo.delta, batch_steps=recipe.batch_steps or algo.batch_steps,
    )


def pretrain_baseline(recipe: BaselineRecipe, env: CMDPEnv, algo: AlgoConfig) -> GaussianPolicy:
    _, state = train(recipe_config(recipe, algo), env)
    return state.policy


def handcrafted_baseline(tag: str, env: CMDPEnv, algo: AlgoConfig) -> GaussianPolicy:
    if tag == "zero":
        template = GaussianPolicy.create(env.spec.state_dim, env.spec.action_dim, "linear",
                                         feature_map=algo.feature_map)
        return template.with_theta(np.zeros(template.n_params))
    raise ValueError(f"unknown handcrafted baseline {tag!r}")


def resolve_baseline(block: BaselineBlock, env: CMDPEnv, algo: AlgoConfig) -> GaussianPolicy | None:
    if block.kind == "none":
        return None
    if block.kind == "checkpoint":
        return load_checkpoint(block.path).policy
    if block.kind == "handcrafted":
        return handcrafted_baseline(block.tag, env, algo)
    return pretrain_baseline(block.recipe, env, algo)


def evaluate(env: CMDPEnv, policy: GaussianPolicy, baseline_policy=None, n_episodes=20, seed=12345) -> dict:
    """Per-episode mean discounted reward, cost and divergence over fresh rollouts."""
    batch = rollout(env, policy, n_episodes * env.spec.horizon, seed)
    if baseline_policy is not None:
        batch = batch.with_divergences(divergence_stream(batch, policy, baseline_policy))
    spec = env.spec
    return {
        "J_R": episode_mean_return(batch, "R", spec.gamma),
        "J_C": episode_mean_return(batch, "C", spec.gamma_cost),
        "J_D": episode_mean_return(batch, "D", spec.gamma_div),
        "episodes": batch.n_episodes,
    }
