"""Interpretable EEG decomposition by weakly supervised time-bin pretraining.

Submodules: ``io`` (EDF and trial store), ``dsp`` (filters and windows),
``filterbank`` (learnable generalized Gaussian filters), ``model``,
``sequencing`` (time-bin mappings and loss), ``training``, ``interpret``,
``downstream`` (probes), ``synthbench`` (synthetic scenes) and ``cli``.
"""
__version__ = "0.1.0"
