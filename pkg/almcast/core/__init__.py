"""
Protocol logic: wire codec, simulated network, overlay/end/monitor hosts and figure runners.
"""
