//! Bundled IR programs with their input domains.

use crate::ir::{parse_program, Program};

/// Value written by attacker-only code in the exploit scenarios.
pub const ATTACKER_MARKER: u64 = 0x666;

#[derive(Debug, Clone, Copy)]
pub struct CorpusProgram {
    pub name: &'static str,
    pub source: &'static str,
    /// Inclusive range of every input word, stored at data words `0..len`.
    pub input_domain: &'static [(u64, u64)],
    pub inputs: [&'static [u64]; 3],
}

impl CorpusProgram {
    pub fn program(&self) -> Program {
        parse_program(self.source).expect("bundled program parses")
    }
}

macro_rules! corpus {
    ($($name:literal => $domain:expr, [$($input:expr),* $(,)?]);* $(;)?) => {
        pub const PROGRAMS: &[CorpusProgram] = &[$(
            CorpusProgram {
                name: $name,
                source: include_str!(concat!("../corpus/", $name, ".fir")),
                input_domain: $domain,
                inputs: [$($input),*],
            }
        ),*];
    };
}

corpus! {
    "straight" => &[(0, 1000), (0, 1000)], [&[1, 2], &[10, 20], &[999, 0]];
    "linear" => &[(0, 1 << 20)], [&[0], &[5], &[123_456]];
    "diamond" => &[(0, 20)], [&[3], &[10], &[17]];
    "loop" => &[(0, 40)], [&[0], &[1], &[25]];
    "nested_loops" => &[(0, 8), (0, 8)], [&[0, 3], &[3, 4], &[6, 2]];
    "recursion" => &[(0, 20)], [&[0], &[4], &[15]];
    "call_fanout" => &[(0, 100), (0, 100)], [&[2, 3], &[9, 70], &[60, 51]];
    "icall_single" => &[(0, 1000)], [&[0], &[7], &[500]];
    "icall_merged" => &[(0, 100), (0, 1), (0, 1)], [&[5, 0, 0], &[5, 1, 1], &[40, 0, 1]];
    "fig4" => &[(1, 12), (0, 1)], [&[1, 0], &[4, 1], &[9, 0]];
    "fig6" => &[(0, 1000)], [&[0], &[11], &[900]];
    "fig3" => &[(0, 1000)], [&[21], &[0], &[333]];
    "nacl" => &[(0, 1000)], [&[31], &[0], &[777]];
    "ecu" => &[(0, 100), (0, 0), (0, 1), (0, 0), (0, 0), (0, 100)],
        [&[1, 0, 1, 0, 0, 2], &[50, 0, 0, 0, 0, 7], &[9, 0, 1, 0, 0, 100]];
}

pub fn get(name: &str) -> Option<&'static CorpusProgram> {
    PROGRAMS.iter().find(|p| p.name == name)
}
