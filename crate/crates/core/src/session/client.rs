//! Minimal blocking protocol client for scripts and tests.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};

use super::protocol::{ClientMsg, ServerMsg};
use crate::error::{Error, Result};

pub struct Client {
    out: TcpStream,
    input: BufReader<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let out = TcpStream::connect(addr)?;
        out.set_nodelay(true)?;
        let input = BufReader::new(out.try_clone()?);
        Ok(Self { out, input })
    }

    pub fn send(&mut self, msg: &ClientMsg) -> Result<()> {
        let mut line = serde_json::to_string(msg)?;
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn send_raw(&mut self, line: &str) -> Result<()> {
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<ServerMsg> {
        let mut line = String::new();
        if self.input.read_line(&mut line)? == 0 {
            return Err(Error::Rejected("server closed the connection".into()));
        }
        Ok(serde_json::from_str(&line)?)
    }

    pub fn request(&mut self, msg: &ClientMsg) -> Result<ServerMsg> {
        self.send(msg)?;
        self.recv()
    }
}
