# fragmix
# Hierarchical token mixing (token merging + transformer mixer) for learning slow
# collective variables and Markov state models from molecular dynamics trajectories
__version__ = "0.1.0"
