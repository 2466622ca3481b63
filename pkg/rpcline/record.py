"""Dispatch record codec.

A record is a fixed 18-byte header (code pointer, data pointer, argument
length, little endian) followed by as many argument bytes as fit in the
CONTROL line. Remaining bytes spill into AUXILIARY lines, each zero padded to
the line size.
"""

import struct

from .models import CostModel, DispatchRecord, RECORD_HEADER_BYTES

_HEADER = struct.Struct("<QQH")


class RecordError(Exception):
    """Base class for dispatch record errors."""
    pass


class OversizeRecordError(RecordError):
    """Arguments too large for the line protocol; they belong on the DMA path."""
    pass


class CorruptRecordError(RecordError):
    """Line images do not decode to a well-formed record."""
    pass


def encode_dispatch_record(
    code_ptr: int,
    data_ptr: int,
    args: bytes,
    cost_model: CostModel,
) -> DispatchRecord:
    """Pack a dispatch record into line images.

    Args:
        code_ptr: Virtual address of the handler entry point
        data_ptr: Virtual address of the handler's data
        args: Marshalled call arguments
        cost_model: Supplies line size and DMA threshold

    Returns:
        DispatchRecord with CONTROL and AUXILIARY line images

    Raises:
        OversizeRecordError: If args reach the DMA threshold
    """
    if len(args) >= cost_model.dma_threshold:
        raise OversizeRecordError(
            f"{len(args)} argument bytes >= dma_threshold {cost_model.dma_threshold}"
        )
    for name, ptr in (("code_ptr", code_ptr), ("data_ptr", data_ptr)):
        if not 0 <= ptr < 1 << 64:
            raise ValueError(f"{name} does not fit 8 bytes: {ptr:#x}")

    line_size = cost_model.line_size
    inline = args[:cost_model.inline_capacity]
    control = _HEADER.pack(code_ptr, data_ptr, len(args)) + inline
    lines = [control.ljust(line_size, b"\0")]

    overflow = args[cost_model.inline_capacity:]
    for offset in range(0, len(overflow), line_size):
        lines.append(overflow[offset:offset + line_size].ljust(line_size, b"\0"))

    return DispatchRecord(
        code_ptr=code_ptr,
        data_ptr=data_ptr,
        args_len=len(args),
        inline_args=inline,
        aux_count=len(lines) - 1,
        lines=tuple(lines),
    )


def decode_dispatch_record(
    lines: tuple[bytes, ...] | list[bytes],
    cost_model: CostModel,
) -> tuple[int, int, bytes]:
    """Unpack line images back into (code_ptr, data_ptr, args).

    Raises:
        CorruptRecordError: If the length field or the line set is inconsistent
    """
    if not lines:
        raise CorruptRecordError("no control line")
    line_size = cost_model.line_size
    if any(len(line) != line_size for line in lines):
        raise CorruptRecordError(f"line images must be {line_size} bytes")

    code_ptr, data_ptr, args_len = _HEADER.unpack_from(lines[0])
    if args_len >= cost_model.dma_threshold:
        raise CorruptRecordError(f"length field {args_len} exceeds the line protocol")
    expected = 1 + cost_model.aux_count(args_len)
    if len(lines) != expected:
        raise CorruptRecordError(
            f"length field {args_len} needs {expected} lines, got {len(lines)}"
        )

    payload = lines[0][RECORD_HEADER_BYTES:] + b"".join(lines[1:])
    return code_ptr, data_ptr, bytes(payload[:args_len])


def service_pointers(service_id: int, method_id: int) -> tuple[int, int]:
    """Deterministic code/data addresses for a service method."""
    base = 0x4000_0000 + (service_id << 24)
    return base + (method_id << 8), 0x7000_0000 + (service_id << 24)
