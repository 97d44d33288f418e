"""NMPC for continuous-discrete semi-explicit index-1 SDAEs."""
