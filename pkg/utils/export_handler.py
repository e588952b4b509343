import json
import logging
import math
import os

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from PIL.PngImagePlugin import PngInfo

from utils.errors import MalformedHeader

logger = logging.getLogger(__name__)

FORMATS = {'CSV': '.csv', 'Excel': '.xlsx', 'JSON': '.json'}


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Cannot serialize {type(value).__name__}")


class ExportHandler:
    @staticmethod
    def export_frame(df, path, export_format='CSV', sheet_name='metrics'):
        """Write a table to CSV, Excel or JSON and return the written path"""
        if export_format not in FORMATS:
            raise ValueError(f"Unsupported export format '{export_format}'")
        if df.empty:
            logger.warning(f"Exporting empty table to {path}")

        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        if export_format == 'CSV':
            df.to_csv(path, index=False)
        elif export_format == 'Excel':
            with pd.ExcelWriter(path, engine='openpyxl') as writer:
                df.to_excel(writer, index=False, sheet_name=sheet_name[:31])
        else:
            df.to_json(path, orient='records', indent=2)
        logger.debug(f"Wrote {len(df)} rows to {path}")
        return path

    @staticmethod
    def export_json(data, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w') as f:
            json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        return path

    @staticmethod
    def export_bytes(data, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'wb') as f:
            f.write(data)
        return path

    @staticmethod
    def export_chart(fig, path):
        """Write a plotly figure as a standalone HTML page"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.write_html(path, include_plotlyjs='cdn')
        logger.debug(f"Wrote chart to {path}")
        return path

    @staticmethod
    def png_shape(length):
        """(width, height) of the square-ish grayscale layout for `length` bytes"""
        width = max(1, math.ceil(math.sqrt(length)))
        height = max(1, math.ceil(length / width))
        return width, height

    @staticmethod
    def export_png(payload, path):
        """
        Store a byte string as an 8-bit grayscale PNG.

        Rows are `ceil(sqrt(len))` pixels wide; the tail is zero-padded and
        the true length and padding are kept in text chunks.
        """
        width, height = ExportHandler.png_shape(len(payload))
        padding = width * height - len(payload)
        image = Image.frombytes('L', (width, height), bytes(payload) + b'\x00' * padding)
        info = PngInfo()
        info.add_text('length', str(len(payload)))
        info.add_text('padding', str(padding))
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        image.save(path, format='PNG', pnginfo=info)
        logger.info(f"Wrote {width}x{height} fingerprint image to {path}")
        return path

    @staticmethod
    def import_png(path):
        """Bytes stored by export_png, padding removed"""
        try:
            with Image.open(path) as image:
                image.load()
                if image.format != 'PNG' or image.mode != 'L':
                    raise MalformedHeader(f"{path} is not an 8-bit grayscale PNG")
                text = getattr(image, 'text', {})
                raw = image.tobytes()
        except (UnidentifiedImageError, OSError) as e:
            raise MalformedHeader(f"Cannot read PNG {path}: {str(e)}")
        try:
            length = int(text['length'])
        except (KeyError, ValueError):
            raise MalformedHeader(f"{path} carries no payload length")
        if not 0 <= length <= len(raw):
            raise MalformedHeader(f"{path} announces {length} bytes but holds {len(raw)}")
        return raw[:length]
