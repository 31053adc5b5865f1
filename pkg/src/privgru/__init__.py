"""Two-party private GRU inference.

Linear algebra runs under packed additive homomorphic encryption on the
server; activations run as garbled circuits evaluated by the client; a
masked-share bridge moves values between the two domains.
"""

__version__ = "0.1.0"
