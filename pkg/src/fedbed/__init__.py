"""fedbed: a desk-scale federated learning testbed.

Three components: a researcher SDK that steers experiments, a broker that
relays every message and parameter blob, and node daemons that govern their
own data, review training plans by content hash, and run the local updates.
"""

__version__ = "0.1.0"
