"""
Pipeline stages: corpus -> distiller -> textcodec -> samples/trainer -> inference -> evaluator
"""
