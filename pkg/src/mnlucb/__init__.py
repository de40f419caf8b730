"""UCB algorithms for multinomial logit bandits."""

__version__ = "0.1.0"
