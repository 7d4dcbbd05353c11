"""2-party secure computation engine built on function secret sharing.

Submodules: ring (Z_2^n tensors), prg (AES-MMO expansion), fss (equality and
comparison keys plus the masked sign protocol), sharing (additive shares and
fixed point), beaver (one-round bilinear protocols), nn_ops (private layers),
runtime (transports, sessions, round accounting), dealer (offline
preprocessing), train (private autograd and SGD), federated (masked n-party
aggregation), demos (desk-scale end-to-end runs), cli (operator entry point).
"""

__version__ = "0.1.0"
