"""
Three-stage cascaded face detector (P-Net → R-Net → O-Net) and face chip export.
"""
