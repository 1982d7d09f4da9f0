"""Learning when to replan: a 2D navigation testbed with rule-based and DQN replanning policies."""

__version__ = "0.1.0"
