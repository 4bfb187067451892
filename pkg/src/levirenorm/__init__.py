"""Levi parametrix heat kernels and renormalisation counterterms for singular SPDEs."""

__version__ = "0.1.0"
