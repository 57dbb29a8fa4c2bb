"""Distributed node-specific block-diagonal LCMV beamforming for wireless acoustic sensor networks.

Modules: :mod:`stft` (framing), :mod:`scene` (room simulation),
:mod:`covariance` (per-node covariance blocks and recursive inverses),
:mod:`beamformer` (centralized and distributed filters), :mod:`network`
(message passing, ledger, topologies), :mod:`metrics` (SNR, TDOA),
:mod:`experiment` and :mod:`cli` (sweeps), :mod:`verify` (self-checks).
"""

__version__ = "0.1.0"
