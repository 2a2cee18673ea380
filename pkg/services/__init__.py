"""Computational engines: mesh I/O, ray casting, SP codec, decoding, metrics and the nested-depth baseline."""
