use super::{
    refresh, verify, AluOp, BasicBlock, CallEntry, Function, Instruction, IrError, Op, PatchRole,
    Program, Reg, NUM_REGS,
};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(u64),
    Punct(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '.'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> Result<Vec<Token>, IrError> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let (line, col) = (ln + 1, i + 1);
            if c.is_whitespace() {
                i += 1;
            } else if is_ident_start(c) {
                let start = i;
                while i < chars.len() && is_ident_char(chars[i]) {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                out.push(Token { tok: Tok::Ident(s), line, col });
            } else if c.is_ascii_digit() {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let s: String = chars[start..i].iter().filter(|&&c| c != '_').collect();
                let v = if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
                    u64::from_str_radix(h, 16)
                } else {
                    s.parse()
                };
                let v = v.map_err(|_| IrError::Syntax {
                    line,
                    col,
                    msg: format!("invalid 64-bit immediate `{s}`"),
                })?;
                out.push(Token { tok: Tok::Num(v), line, col });
            } else if "{}:,[]+()".contains(c) {
                out.push(Token { tok: Tok::Punct(c), line, col });
                i += 1;
            } else {
                return Err(IrError::Syntax { line, col, msg: format!("unexpected character `{c}`") });
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn peek_at(&self, off: usize) -> Option<&Token> {
        self.toks.get(self.pos + off)
    }

    fn here(&self) -> (usize, usize) {
        self.peek()
            .or_else(|| self.toks.last())
            .map(|t| (t.line, t.col))
            .unwrap_or((1, 1))
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, IrError> {
        let (line, col) = self.here();
        Err(IrError::Syntax { line, col, msg: msg.into() })
    }

    fn punct(&mut self, c: char) -> Result<(), IrError> {
        match self.peek() {
            Some(Token { tok: Tok::Punct(p), .. }) if *p == c => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{c}`")),
        }
    }

    fn at_punct(&self, c: char) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Punct(p), .. }) if *p == c)
    }

    fn ident(&mut self, what: &str) -> Result<String, IrError> {
        match self.peek() {
            Some(Token { tok: Tok::Ident(s), .. }) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn imm(&mut self) -> Result<u64, IrError> {
        match self.peek() {
            Some(Token { tok: Tok::Num(v), .. }) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => self.err("expected immediate"),
        }
    }

    fn reg(&mut self) -> Result<Reg, IrError> {
        let (line, col) = self.here();
        let name = self.ident("register")?;
        let n = name
            .strip_prefix('r')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&n| n < NUM_REGS);
        match n {
            Some(n) => {
                let r = Reg(n as u8);
                if r.is_reserved() {
                    Err(IrError::ReservedRegister { line, col, reg: name })
                } else {
                    Ok(r)
                }
            }
            None => Err(IrError::Syntax { line, col, msg: format!("`{name}` is not a register") }),
        }
    }

    fn is_label_start(&self) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Ident(_), .. }))
            && matches!(self.peek_at(1), Some(Token { tok: Tok::Punct(':'), .. }))
    }

    fn instruction(&mut self) -> Result<Op, IrError> {
        let mnemonic = self.ident("instruction")?;
        let op = match mnemonic.as_str() {
            "const" => {
                let dst = self.reg()?;
                self.punct(',')?;
                Op::Const { dst, imm: self.imm()? }
            }
            "alu" => {
                let name = self.ident("ALU operation")?;
                let Some(op) = AluOp::from_mnemonic(&name) else {
                    self.pos -= 1;
                    return self.err(format!("unknown ALU operation `{name}`"));
                };
                let dst = self.reg()?;
                self.punct(',')?;
                let lhs = self.reg()?;
                self.punct(',')?;
                let rhs = self.reg()?;
                Op::Alu { op, dst, lhs, rhs }
            }
            "load" => {
                let dst = self.reg()?;
                self.punct(',')?;
                let (base, offset) = self.mem_operand()?;
                Op::Load { dst, base, offset }
            }
            "store" => {
                let (base, offset) = self.mem_operand()?;
                self.punct(',')?;
                Op::Store { base, offset, src: self.reg()? }
            }
            "branch" => Op::Branch { target: self.ident("label")? },
            "cbranch" => {
                let cond = self.reg()?;
                self.punct(',')?;
                Op::CondBranch { cond, target: self.ident("label")? }
            }
            "call" => Op::Call { callee: self.ident("function name")?, entry: CallEntry::Symbol },
            "call.direct" => {
                Op::Call { callee: self.ident("function name")?, entry: CallEntry::Direct }
            }
            "icall" => {
                let target = self.reg()?;
                let kw = self.ident("`targets`")?;
                if kw != "targets" {
                    self.pos -= 1;
                    return self.err("expected `targets(`");
                }
                self.punct('(')?;
                let mut candidates = vec![self.ident("function name")?];
                while self.at_punct(',') {
                    self.pos += 1;
                    candidates.push(self.ident("function name")?);
                }
                self.punct(')')?;
                Op::CallIndirect { target, candidates }
            }
            "addrof" => {
                let dst = self.reg()?;
                self.punct(',')?;
                Op::AddrOf { dst, func: self.ident("function name")? }
            }
            "out" => Op::Out { src: self.reg()? },
            "return" => Op::Return,
            "halt" => Op::Halt,
            "cfi.update" => Op::CfiUpdate,
            "cfi.patch" => {
                let name = self.ident("patch role")?;
                let Some(role) = PatchRole::from_name(&name) else {
                    self.pos -= 1;
                    return self.err(format!("unknown patch role `{name}`"));
                };
                self.punct(',')?;
                Op::CfiPatch { role, value: self.imm()? }
            }
            "cfi.ldret" => Op::CfiLoadRetPatch { value: self.imm()? },
            "cfi.applyret" => Op::CfiApplyRetPatch,
            "cfi.check" => Op::CfiCheck { constant: self.imm()? },
            "cfi.push" => Op::CfiStatePush,
            "cfi.mixpop" => Op::CfiStateMixPop,
            "cfi.ldsig" => Op::CfiLoadSig { value: self.imm()? },
            "cfi.xorsig" => Op::CfiXorSig,
            "cfi.assert" => Op::CfiAssert { expected: self.imm()? },
            other => {
                self.pos -= 1;
                return self.err(format!("unknown instruction `{other}`"));
            }
        };
        Ok(op)
    }

    fn mem_operand(&mut self) -> Result<(Reg, u64), IrError> {
        self.punct('[')?;
        let base = self.reg()?;
        let offset = if self.at_punct('+') {
            self.pos += 1;
            self.imm()?
        } else {
            0
        };
        self.punct(']')?;
        Ok((base, offset))
    }

    fn function(&mut self) -> Result<Function, IrError> {
        let kw = self.ident("`fn`")?;
        if kw != "fn" {
            self.pos -= 1;
            return self.err("expected `fn`");
        }
        let name = self.ident("function name")?;
        self.punct('{')?;

        let mut prologue = Vec::new();
        while !self.is_label_start() && !self.at_punct('}') {
            if self.peek().is_none() {
                return self.err("unexpected end of input");
            }
            prologue.push(Instruction::new(self.instruction()?));
        }

        let mut blocks: Vec<BasicBlock> = Vec::new();
        while !self.at_punct('}') {
            if self.peek().is_none() {
                return self.err("unexpected end of input, missing `}`");
            }
            if !self.is_label_start() {
                return self.err("instruction after a terminator must start a new labeled block");
            }
            let label = self.ident("label")?;
            self.punct(':')?;
            let mut insts = Vec::new();
            loop {
                if self.is_label_start() || self.at_punct('}') || self.peek().is_none() {
                    break;
                }
                let op = self.instruction()?;
                let term = op.is_terminator();
                insts.push(Instruction::new(op));
                if term {
                    break;
                }
            }
            if insts.is_empty() {
                return self.err(format!("block `{label}` is empty"));
            }
            if !insts.last().expect("non-empty").op.is_terminator() {
                return Err(IrError::MissingTerminator { function: name, label });
            }
            blocks.push(BasicBlock::new(label, insts));
        }
        self.punct('}')?;
        if blocks.is_empty() {
            return self.err(format!("function `{name}` has no blocks"));
        }
        Ok(Function { name, prologue, blocks, single_return: None, address_taken: false })
    }
}

/// Parses IR source into a verified [`Program`] with CFG edges populated.
///
/// The entry function is `main` when present, otherwise the first function.
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    let mut parser = Parser { toks: lex(text)?, pos: 0 };
    let mut functions = Vec::new();
    while parser.peek().is_some() {
        functions.push(parser.function()?);
    }
    if functions.is_empty() {
        return Err(IrError::Empty);
    }
    let entry = if functions.iter().any(|f| f.name == "main") {
        "main".to_string()
    } else {
        functions[0].name.clone()
    };
    let mut p = Program { functions, entry, base_address: 0 };
    // label and call resolution must precede CFG construction
    verify_names(&p)?;
    refresh(&mut p);
    verify(&p)?;
    Ok(p)
}

fn verify_names(p: &Program) -> Result<(), IrError> {
    for f in &p.functions {
        for i in f.instructions() {
            match &i.op {
                Op::Branch { target } | Op::CondBranch { target, .. } => {
                    if f.block_index(target).is_none() {
                        return Err(IrError::UndefinedLabel {
                            function: f.name.clone(),
                            label: target.clone(),
                        });
                    }
                }
                Op::Call { callee: name, .. } | Op::AddrOf { func: name, .. } => {
                    if p.function(name).is_none() {
                        return Err(IrError::UndefinedFunction { name: name.clone() });
                    }
                }
                Op::CallIndirect { candidates, .. } => {
                    if let Some(c) = candidates.iter().find(|c| p.function(c).is_none()) {
                        return Err(IrError::UndefinedFunction { name: c.clone() });
                    }
                }
                _ => {}
            }
        }
        for (bi, b) in f.blocks.iter().enumerate() {
            if matches!(b.terminator(), Op::CondBranch { .. }) && bi + 1 == f.blocks.len() {
                return Err(IrError::MissingFallthrough {
                    function: f.name.clone(),
                    label: b.label.clone(),
                });
            }
        }
    }
    Ok(())
}
