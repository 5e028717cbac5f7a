//! Length-prefixed binary wire format.
//!
//! `u32 length | u8 type | payload`, where `length` counts the type byte and
//! the payload. Header integers are big-endian; float payloads are
//! little-endian `f32`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROTO_VERSION: u8 = 1;

/// Upper bound on `length`; anything larger is treated as a corrupt stream.
pub const MAX_FRAME_LEN: u32 = 1 << 20;

pub const TYPE_HELLO: u8 = 0x01;
pub const TYPE_SET_NEUTRAL: u8 = 0x02;
pub const TYPE_BLENDSHAPE_FRAME: u8 = 0x03;
pub const TYPE_MOTOR_COMMAND: u8 = 0x04;
pub const TYPE_STATS: u8 = 0x05;
pub const TYPE_ERROR: u8 = 0x06;

/// Codes carried by [`Message::Error`].
pub mod codes {
    pub const MALFORMED: u16 = 1;
    pub const DIMENSION: u16 = 2;
    pub const HANDSHAKE: u16 = 3;
    pub const UNSUPPORTED: u16 = 4;
    pub const INTERNAL: u16 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        proto_version: u8,
        dof: u8,
        blendshape_dim: u8,
    },
    SetNeutral(Vec<f32>),
    BlendshapeFrame {
        timestamp_us: u64,
        values: Vec<f32>,
    },
    MotorCommand {
        timestamp_us: u64,
        values: Vec<f32>,
    },
    /// Opaque JSON document; an empty payload from a client asks for stats.
    Stats(Vec<u8>),
    Error {
        code: u16,
        message: String,
    },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Self::Hello { .. } => TYPE_HELLO,
            Self::SetNeutral(_) => TYPE_SET_NEUTRAL,
            Self::BlendshapeFrame { .. } => TYPE_BLENDSHAPE_FRAME,
            Self::MotorCommand { .. } => TYPE_MOTOR_COMMAND,
            Self::Stats(_) => TYPE_STATS,
            Self::Error { .. } => TYPE_ERROR,
        }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        Self::Error {
            code,
            message: message.into(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        let floats = |out: &mut Vec<u8>, v: &[f32]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        let mut out = Vec::new();
        match self {
            Self::Hello {
                proto_version,
                dof,
                blendshape_dim,
            } => out.extend_from_slice(&[*proto_version, *dof, *blendshape_dim]),
            Self::SetNeutral(v) => floats(&mut out, v),
            Self::BlendshapeFrame {
                timestamp_us,
                values,
            }
            | Self::MotorCommand {
                timestamp_us,
                values,
            } => {
                out.extend_from_slice(&timestamp_us.to_be_bytes());
                floats(&mut out, values);
            }
            Self::Stats(json) => out.extend_from_slice(json),
            Self::Error { code, message } => {
                out.extend_from_slice(&code.to_be_bytes());
                out.extend_from_slice(message.as_bytes());
            }
        }
        out
    }

    /// Full wire representation including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let len = payload.len() as u32 + 1;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.type_byte());
        out.extend_from_slice(&payload);
        out
    }

    /// Parses one message body (type byte plus payload, no length prefix).
    pub fn decode(body: &[u8]) -> Result<Self> {
        let (&ty, payload) = body
            .split_first()
            .ok_or_else(|| Error::Protocol("empty frame".into()))?;
        let floats = |bytes: &[u8]| -> Result<Vec<f32>> {
            if bytes.len() % 4 != 0 {
                return Err(Error::Protocol(format!(
                    "float payload of {} bytes is not a multiple of 4",
                    bytes.len()
                )));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let stamped = |payload: &[u8]| -> Result<(u64, Vec<f32>)> {
            if payload.len() < 8 {
                return Err(Error::Protocol("timestamped payload shorter than 8 bytes".into()));
            }
            let (ts, rest) = payload.split_at(8);
            Ok((u64::from_be_bytes(ts.try_into().expect("8 bytes")), floats(rest)?))
        };
        match ty {
            TYPE_HELLO => match *payload {
                [proto_version, dof, blendshape_dim] => Ok(Self::Hello {
                    proto_version,
                    dof,
                    blendshape_dim,
                }),
                _ => Err(Error::Protocol(format!("HELLO payload of {} bytes", payload.len()))),
            },
            TYPE_SET_NEUTRAL => Ok(Self::SetNeutral(floats(payload)?)),
            TYPE_BLENDSHAPE_FRAME => {
                let (timestamp_us, values) = stamped(payload)?;
                Ok(Self::BlendshapeFrame {
                    timestamp_us,
                    values,
                })
            }
            TYPE_MOTOR_COMMAND => {
                let (timestamp_us, values) = stamped(payload)?;
                Ok(Self::MotorCommand {
                    timestamp_us,
                    values,
                })
            }
            TYPE_STATS => Ok(Self::Stats(payload.to_vec())),
            TYPE_ERROR => {
                if payload.len() < 2 {
                    return Err(Error::Protocol("ERROR payload shorter than 2 bytes".into()));
                }
                let code = u16::from_be_bytes([payload[0], payload[1]]);
                let message = String::from_utf8(payload[2..].to_vec())
                    .map_err(|_| Error::Protocol("ERROR message is not UTF-8".into()))?;
                Ok(Self::Error { code, message })
            }
            other => Err(Error::Protocol(format!("unknown message type 0x{other:02x}"))),
        }
    }
}

/// Bytes a 55-channel (or any) blendshape frame occupies on the wire.
pub fn blendshape_frame_wire_len(channels: usize) -> usize {
    4 + 1 + 8 + 4 * channels
}

/// Reads one message. `Ok(None)` signals a clean end of stream at a frame
/// boundary; a frame that decodes badly is reported as
/// [`ReadError::Frame`] so the connection can carry on.
pub fn read_message<R: Read>(r: &mut R) -> std::result::Result<Option<Message>, ReadError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(ReadError::Io(e)),
    }
    let len = u32::from_be_bytes(len);
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(ReadError::Fatal(format!("frame length {len} out of range")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(ReadError::Io)?;
    Message::decode(&body).map(Some).map_err(ReadError::Frame)
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&msg.encode())
}

#[derive(Debug)]
pub enum ReadError {
    /// Transport failure; the stream is unusable.
    Io(io::Error),
    /// Framing is lost (bad length); the stream is unusable.
    Fatal(String),
    /// A well-framed message with an invalid body; later frames are fine.
    Frame(Error),
}

impl std::fmt::Display for ReadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io: {e}"),
            Self::Fatal(m) => write!(f, "{m}"),
            Self::Frame(e) => write!(f, "{e}"),
        }
    }
}

/// JSON messages of the WebSocket mirror.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WsMessage {
    BlendshapeFrame {
        t_us: u64,
        values: Vec<f32>,
    },
    MotorCommand {
        t_us: u64,
        values: Vec<f32>,
    },
    Stats {
        t_us: u64,
        values: serde_json::Value,
    },
    SetNeutral {
        #[serde(default)]
        t_us: u64,
        values: Vec<f32>,
    },
    /// Sent by the server when a mirror client connects.
    Hello {
        proto_version: u8,
        dof: usize,
        blendshape_dim: usize,
    },
    Error {
        code: u16,
        message: String,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_types() -> Vec<Message> {
        vec![
            Message::Hello {
                proto_version: PROTO_VERSION,
                dof: 33,
                blendshape_dim: 55,
            },
            Message::SetNeutral(vec![0.1, 0.0, 1.0]),
            Message::BlendshapeFrame {
                timestamp_us: 1_234_567,
                values: vec![0.5; 55],
            },
            Message::MotorCommand {
                timestamp_us: u64::MAX,
                values: vec![0.25, 1.0],
            },
            Message::Stats(br#"{"publish_hz":60.0}"#.to_vec()),
            Message::error(codes::DIMENSION, "expected 55 channels"),
        ]
    }

    #[test]
    fn every_type_round_trips() {
        for msg in all_types() {
            let wire = msg.encode();
            let len = u32::from_be_bytes(wire[..4].try_into().unwrap()) as usize;
            assert_eq!(len, wire.len() - 4);
            assert_eq!(Message::decode(&wire[4..]).unwrap(), msg);
            let mut cursor = io::Cursor::new(wire);
            assert_eq!(read_message(&mut cursor).unwrap(), Some(msg));
            assert!(read_message(&mut cursor).unwrap().is_none());
        }
    }

    #[test]
    fn blendshape_frame_layout() {
        let msg = Message::BlendshapeFrame {
            timestamp_us: 0x0102030405060708,
            values: vec![1.0; 55],
        };
        let wire = msg.encode();
        assert_eq!(wire.len(), 233);
        assert_eq!(blendshape_frame_wire_len(55), 233);
        assert_eq!(&wire[..4], &229u32.to_be_bytes());
        assert_eq!(wire[4], TYPE_BLENDSHAPE_FRAME);
        assert_eq!(&wire[5..13], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(&wire[13..17], &1.0f32.to_le_bytes());
    }

    #[test]
    fn malformed_bodies_are_frame_errors() {
        for body in [
            vec![],
            vec![0x7f],
            vec![TYPE_HELLO, 1, 2],
            vec![TYPE_BLENDSHAPE_FRAME, 0, 0, 0],
            vec![TYPE_BLENDSHAPE_FRAME, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2],
            vec![TYPE_ERROR, 0],
            vec![TYPE_ERROR, 0, 1, 0xff],
        ] {
            assert!(Message::decode(&body).is_err(), "{body:?}");
        }
        let mut wire = (2u32).to_be_bytes().to_vec();
        wire.extend_from_slice(&[TYPE_SET_NEUTRAL, 9]);
        wire.extend(Message::Stats(Vec::new()).encode());
        let mut cursor = io::Cursor::new(wire);
        assert!(matches!(read_message(&mut cursor), Err(ReadError::Frame(_))));
        assert_eq!(read_message(&mut cursor).unwrap(), Some(Message::Stats(Vec::new())));
    }

    #[test]
    fn oversized_length_is_fatal() {
        let mut cursor = io::Cursor::new((MAX_FRAME_LEN + 1).to_be_bytes().to_vec());
        assert!(matches!(read_message(&mut cursor), Err(ReadError::Fatal(_))));
    }

    #[test]
    fn mirror_json_shape() {
        let m = WsMessage::MotorCommand {
            t_us: 5,
            values: vec![0.5],
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["type"], "motor_command");
        assert_eq!(v["t_us"], 5);
        let back: WsMessage =
            serde_json::from_str(r#"{"type":"set_neutral","values":[0.1,0.2]}"#).unwrap();
        assert_eq!(
            back,
            WsMessage::SetNeutral {
                t_us: 0,
                values: vec![0.1, 0.2]
            }
        );
    }

    proptest! {
        #[test]
        fn float_frames_round_trip_bitwise(
            ts in any::<u64>(),
            bits in proptest::collection::vec(any::<u32>(), 0..80),
        ) {
            let values: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let msg = Message::MotorCommand { timestamp_us: ts, values: values.clone() };
            let wire = msg.encode();
            prop_assert_eq!(wire.len(), 13 + 4 * values.len());
            match Message::decode(&wire[4..]).unwrap() {
                Message::MotorCommand { timestamp_us, values: back } => {
                    prop_assert_eq!(timestamp_us, ts);
                    let a: Vec<u32> = back.iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(a, bits);
                }
                other => prop_assert!(false, "decoded {:?}", other),
            }
        }
    }
}
