//! Per-syscall argument type signatures and recursive structure templates.
//!
//! The type database is the stand-in for statically inferred argument type
//! information: one voted signature per syscall name, plus structure
//! templates referenced by pointer-typed slots. Field granularity is 8
//! bytes throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// Argument direction as seen by the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    In,
    Out,
}

impl Direction {
    pub fn letter(self) -> char {
        match self {
            Direction::In => 'I',
            Direction::Out => 'O',
        }
    }

    pub fn from_letter(c: char) -> Option<Direction> {
        match c {
            'I' => Some(Direction::In),
            'O' => Some(Direction::Out),
            _ => None,
        }
    }
}

/// Value kind of an argument slot or structure field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    Scalar,
    Handle,
    Pointer,
    Array,
    FunctionPointer,
}

impl ValueKind {
    pub fn letter(self) -> char {
        match self {
            ValueKind::Scalar => 'S',
            ValueKind::Handle => 'H',
            ValueKind::Pointer => 'P',
            ValueKind::Array => 'A',
            ValueKind::FunctionPointer => 'F',
        }
    }

    pub fn from_letter(c: char) -> Option<ValueKind> {
        match c {
            'S' => Some(ValueKind::Scalar),
            'H' => Some(ValueKind::Handle),
            'P' => Some(ValueKind::Pointer),
            'A' => Some(ValueKind::Array),
            'F' => Some(ValueKind::FunctionPointer),
            _ => None,
        }
    }

    /// Pointer-like kinds carry a pointee and are staged as allocations.
    pub fn is_pointer_like(self) -> bool {
        matches!(self, ValueKind::Pointer | ValueKind::Array)
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Direction plus kind for one argument slot, with an optional structure
/// template for pointer-like slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgTypeDescriptor {
    pub direction: Direction,
    pub kind: ValueKind,
    pub pointee: Option<String>,
}

impl ArgTypeDescriptor {
    pub fn new(direction: Direction, kind: ValueKind) -> Self {
        ArgTypeDescriptor {
            direction,
            kind,
            pointee: None,
        }
    }

    pub fn with_pointee(direction: Direction, kind: ValueKind, id: &str) -> Self {
        ArgTypeDescriptor {
            direction,
            kind,
            pointee: Some(id.to_string()),
        }
    }
}

/// One field of a structure template. Offsets are absolute byte offsets
/// within the structure; values are 8-byte words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructField {
    pub offset: u32,
    pub kind: ValueKind,
    pub nested: Option<String>,
}

/// A recursive structure layout referenced from pointer-typed slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructTemplate {
    pub id: String,
    pub fields: Vec<StructField>,
    pub size: u32,
}

/// The full database: one signature per syscall name plus the structure
/// templates those signatures reference.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TypeDb {
    pub signatures: BTreeMap<String, Vec<ArgTypeDescriptor>>,
    pub structs: BTreeMap<String, StructTemplate>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TypeDbError {
    #[error("malformed type db line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("cyclic structure reference through `{0}`")]
    CyclicStruct(String),
    #[error("unresolved structure id `{0}`")]
    UnresolvedStruct(String),
    #[error("duplicate signature for `{0}`")]
    DuplicateSignature(String),
    #[error("no signature for syscall `{0}`")]
    NotFound(String),
}

impl TypeDb {
    pub fn lookup_signature(&self, name: &str) -> Result<&[ArgTypeDescriptor], TypeDbError> {
        self.signatures
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| TypeDbError::NotFound(name.to_string()))
    }

    pub fn get_struct(&self, id: &str) -> Result<&StructTemplate, TypeDbError> {
        self.structs
            .get(id)
            .ok_or_else(|| TypeDbError::UnresolvedStruct(id.to_string()))
    }

    /// Flattens one template to its own `(offset, kind)` words. Nested
    /// pointer fields stay as single pointer words; their targets are
    /// separate allocation plans, not inlined.
    pub fn flatten_struct(&self, id: &str) -> Result<Vec<(u32, ValueKind)>, TypeDbError> {
        let tpl = self.get_struct(id)?;
        Ok(tpl.fields.iter().map(|f| (f.offset, f.kind)).collect())
    }

    /// All template ids reachable from `id`, depth-first, `id` first.
    pub fn reachable_structs(&self, id: &str) -> Result<Vec<String>, TypeDbError> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        self.walk_structs(id, &mut seen, &mut out)?;
        Ok(out)
    }

    fn walk_structs(
        &self,
        id: &str,
        seen: &mut BTreeSet<String>,
        out: &mut Vec<String>,
    ) -> Result<(), TypeDbError> {
        if !seen.insert(id.to_string()) {
            return Ok(());
        }
        let tpl = self.get_struct(id)?;
        out.push(id.to_string());
        for f in &tpl.fields {
            if let Some(n) = &f.nested {
                self.walk_structs(n, seen, out)?;
            }
        }
        Ok(())
    }

    /// Template ids reachable from a signature's pointee references, in
    /// slot order then depth-first.
    pub fn structs_for_signature(&self, name: &str) -> Result<Vec<String>, TypeDbError> {
        let sig = self.lookup_signature(name)?.to_vec();
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for desc in &sig {
            if let Some(id) = &desc.pointee {
                self.walk_structs(id, &mut seen, &mut out)?;
            }
        }
        Ok(out)
    }

    fn validate(&self) -> Result<(), TypeDbError> {
        for (name, sig) in &self.signatures {
            for desc in sig {
                if let Some(id) = &desc.pointee {
                    if !desc.kind.is_pointer_like() {
                        return Err(TypeDbError::Malformed {
                            line: 0,
                            reason: format!("{name}: pointee on non-pointer slot"),
                        });
                    }
                    self.get_struct(id)?;
                }
            }
        }
        // acyclicity via DFS with an on-stack set
        for id in self.structs.keys() {
            let mut stack = BTreeSet::new();
            self.check_cycle(id, &mut stack)?;
        }
        Ok(())
    }

    fn check_cycle(&self, id: &str, stack: &mut BTreeSet<String>) -> Result<(), TypeDbError> {
        if !stack.insert(id.to_string()) {
            return Err(TypeDbError::CyclicStruct(id.to_string()));
        }
        let tpl = self.get_struct(id)?;
        for f in &tpl.fields {
            if let Some(n) = &f.nested {
                self.check_cycle(n, stack)?;
            }
        }
        stack.remove(id);
        Ok(())
    }
}

/// Parses the text type-DB format:
///
/// ```text
/// S|<name>|<argc>|<slot>:<DirKind>[:<structid>];...
/// T|<structid>|<offset>:<Kind>[:<structid>];...;size=<bytes>
/// ```
pub fn load_type_db(text: &str) -> Result<TypeDb, TypeDbError> {
    let mut db = TypeDb::default();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| TypeDbError::Malformed {
            line: lineno,
            reason: reason.to_string(),
        };
        let mut parts = line.split('|');
        match parts.next() {
            Some("S") => {
                let name = parts.next().ok_or_else(|| malformed("missing name"))?;
                let argc: usize = parts
                    .next()
                    .ok_or_else(|| malformed("missing argc"))?
                    .parse()
                    .map_err(|_| malformed("bad argc"))?;
                let body = parts.next().unwrap_or("");
                if parts.next().is_some() {
                    return Err(malformed("extra fields"));
                }
                let mut sig = Vec::new();
                if !body.is_empty() {
                    for tok in body.split(';') {
                        let mut bits = tok.split(':');
                        let slot: usize = bits
                            .next()
                            .ok_or_else(|| malformed("missing slot"))?
                            .parse()
                            .map_err(|_| malformed("bad slot"))?;
                        if slot != sig.len() {
                            return Err(malformed("slots must be contiguous from 0"));
                        }
                        let dk = bits.next().ok_or_else(|| malformed("missing dir/kind"))?;
                        let mut chars = dk.chars();
                        let direction = chars
                            .next()
                            .and_then(Direction::from_letter)
                            .ok_or_else(|| malformed("bad direction"))?;
                        let kind = chars
                            .next()
                            .and_then(ValueKind::from_letter)
                            .ok_or_else(|| malformed("bad kind"))?;
                        if chars.next().is_some() {
                            return Err(malformed("bad dir/kind token"));
                        }
                        let pointee = bits.next().map(str::to_string);
                        if bits.next().is_some() {
                            return Err(malformed("bad slot token"));
                        }
                        if pointee.is_some() && !kind.is_pointer_like() {
                            return Err(malformed("pointee on non-pointer slot"));
                        }
                        if kind == ValueKind::FunctionPointer && pointee.is_some() {
                            return Err(malformed("function pointer cannot have a pointee"));
                        }
                        sig.push(ArgTypeDescriptor {
                            direction,
                            kind,
                            pointee,
                        });
                    }
                }
                if sig.len() != argc {
                    return Err(malformed("argc does not match slot count"));
                }
                if db.signatures.insert(name.to_string(), sig).is_some() {
                    return Err(TypeDbError::DuplicateSignature(name.to_string()));
                }
            }
            Some("T") => {
                let id = parts.next().ok_or_else(|| malformed("missing struct id"))?;
                let body = parts.next().ok_or_else(|| malformed("missing fields"))?;
                if parts.next().is_some() {
                    return Err(malformed("extra fields"));
                }
                let mut fields: Vec<StructField> = Vec::new();
                let mut size: Option<u32> = None;
                for tok in body.split(';') {
                    if let Some(sz) = tok.strip_prefix("size=") {
                        size = Some(sz.parse().map_err(|_| malformed("bad size"))?);
                        continue;
                    }
                    let mut bits = tok.split(':');
                    let offset: u32 = bits
                        .next()
                        .ok_or_else(|| malformed("missing offset"))?
                        .parse()
                        .map_err(|_| malformed("bad offset"))?;
                    let kind = bits
                        .next()
                        .and_then(|k| {
                            let mut c = k.chars();
                            let kind = c.next().and_then(ValueKind::from_letter)?;
                            if c.next().is_some() {
                                return None;
                            }
                            Some(kind)
                        })
                        .ok_or_else(|| malformed("bad field kind"))?;
                    let nested = bits.next().map(str::to_string);
                    if bits.next().is_some() {
                        return Err(malformed("bad field token"));
                    }
                    if nested.is_some() && !kind.is_pointer_like() {
                        return Err(malformed("nested template on non-pointer field"));
                    }
                    if let Some(last) = fields.last() {
                        if offset <= last.offset {
                            return Err(malformed("offsets must be strictly increasing"));
                        }
                    }
                    fields.push(StructField {
                        offset,
                        kind,
                        nested,
                    });
                }
                if fields.is_empty() {
                    return Err(malformed("empty struct"));
                }
                let min_size = fields.last().unwrap().offset + 8;
                let size = size.unwrap_or(min_size);
                if size < min_size {
                    return Err(malformed("size smaller than last offset + 8"));
                }
                let tpl = StructTemplate {
                    id: id.to_string(),
                    fields,
                    size,
                };
                if db.structs.insert(id.to_string(), tpl).is_some() {
                    return Err(malformed("duplicate struct id"));
                }
            }
            _ => return Err(malformed("unknown record tag")),
        }
    }
    db.validate()?;
    Ok(db)
}

/// Canonical serialization, inverse of [`load_type_db`].
pub fn emit_type_db(db: &TypeDb) -> String {
    let mut out = String::new();
    for (name, sig) in &db.signatures {
        let body: Vec<String> = sig
            .iter()
            .enumerate()
            .map(|(slot, d)| {
                let mut s = format!("{}:{}{}", slot, d.direction.letter(), d.kind.letter());
                if let Some(p) = &d.pointee {
                    s.push(':');
                    s.push_str(p);
                }
                s
            })
            .collect();
        out.push_str(&format!("S|{}|{}|{}\n", name, sig.len(), body.join(";")));
    }
    for (id, tpl) in &db.structs {
        let mut body: Vec<String> = tpl
            .fields
            .iter()
            .map(|f| {
                let mut s = format!("{}:{}", f.offset, f.kind.letter());
                if let Some(n) = &f.nested {
                    s.push(':');
                    s.push_str(n);
                }
                s
            })
            .collect();
        body.push(format!("size={}", tpl.size));
        out.push_str(&format!("T|{}|{}\n", id, body.join(";")));
    }
    out
}
