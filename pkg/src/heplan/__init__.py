"""heplan: layer-wise HE parameter planning for private linear layers.

Submodules:
    modmath   exact modular arithmetic + negacyclic NTT kernels
    ring      RingPoly / RnsPoly and samplers
    params    parameter rules, security table, modulus enumeration
    bfv       desk-scale BFV simulator with exact noise measurement
    packing   slot packing plans and homomorphic op schedules
    failure   decryption-failure estimation (Monte Carlo + sigma-scaled)
    latency   primitive-op profiling and inference latency estimates
    net       quantized desk-scale network engine with error injection
    drl       policy-gradient search over per-layer failure-rate targets
    cli       command-line front end
"""

__version__ = "0.1.0"
