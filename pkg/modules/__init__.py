"""
modules — Configuration, data, augmentation, training and experiment layers.
"""
