"""Human-in-the-loop RL lab: interactive double Q-learning with human/agent
action blending on a deterministic 2D waypoint driving simulator, plus
imitation baselines and post-hoc counterfactual intervention assessment."""

__version__ = "0.1.0"
