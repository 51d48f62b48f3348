'''Module init file'''
__all__ = ['tensor', 'layers', 'unet', 'archive', 'metrics', 'schedule', 'procedure', 'data',
           'synth', 'trainer', 'plotting', 'config', 'cli', 'errors']

__version__ = '0.3.1'
