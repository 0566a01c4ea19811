//! Model of a RISC-V processor-trace pipeline: a retirement log goes through
//! an encoder, a packet codec and a transport, and a decoder rebuilds the
//! executed PC sequence from the packets and a static instruction map.

pub mod decoder;
pub mod encoder;
pub mod harness;
pub mod instruction;
pub mod packet;
pub mod transport;

pub use decoder::{decode_stream, DecodeError, DecodeReport, Decoder};
pub use encoder::{encode_blocks, EncodeError, Encoder, EncoderConfig, ResyncMode};
pub use instruction::{IType, InstructionMap, RetirementBlock};
pub use packet::{decode_packet, encode_packet, CodecError, TracePacket};
