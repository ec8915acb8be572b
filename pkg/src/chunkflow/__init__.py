"""Action-chunk flow policies with latency-aware execution.

Submodules: ``unified_space``, ``flow_policy``, ``experts``, ``mpg``, ``uac``,
``runtime``, ``sim``, ``seqmodel`` and the ``config`` / ``cli`` harness.
"""

__version__ = "0.1.0"
