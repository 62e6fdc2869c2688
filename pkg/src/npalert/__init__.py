"""npalert: a rediscovery alarm for antibiotic natural products.

Given a list of organism identifications, the pipeline expands them through
a backbone taxonomy, mines PubMed and the LOTUS dataset for prior evidence
of antibiotic activity, and organises everything in a typed knowledge graph
with three alert levels for reviewer triage.
"""

__version__ = "0.1.0"
