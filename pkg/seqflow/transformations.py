registered_transformation = {
    'tuple': tuple,
    # per-dim / per-step are accepted with dashes on the command line
    'unit': lambda x: x.replace('-', '_'),
}
