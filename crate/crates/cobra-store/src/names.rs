//! Naming rules shared by containers, objects, namespace entries, and
//! catalog logical names.

use crate::error::{Result, StoreError};

/// Prefix reserved for system objects such as the per-container namespace
/// table.
pub const RESERVED_PREFIX: &str = "__";

/// Maximum name length in bytes.
pub const MAX_NAME_BYTES: usize = 255;

/// Checks the base name rules: non-empty UTF-8, at most 255 bytes, no `/`,
/// no `|`, no control characters. Reservation of the `__` prefix is a
/// separate check because system callers bypass it.
pub fn validate_name(name: &str) -> Result<()> {
    let fail = |reason: &str| {
        Err(StoreError::InvalidName {
            name: name.to_owned(),
            reason: reason.to_owned(),
        })
    };
    if name.is_empty() {
        return fail("empty");
    }
    if name.len() > MAX_NAME_BYTES {
        return fail("longer than 255 bytes");
    }
    for c in name.chars() {
        if c == '/' || c == '|' {
            return fail("contains '/' or '|'");
        }
        if c.is_control() {
            return fail("contains a control character");
        }
    }
    Ok(())
}

/// Full user-facing validation: base rules plus the `__` reservation.
pub fn validate_user_name(name: &str) -> Result<()> {
    validate_name(name)?;
    if name.starts_with(RESERVED_PREFIX) {
        return Err(StoreError::InvalidName {
            name: name.to_owned(),
            reason: format!("prefix {RESERVED_PREFIX:?} is reserved for system objects"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules() {
        assert!(validate_name("ev001").is_ok());
        assert!(validate_name("").is_err());
        assert!(validate_name("a/b").is_err());
        assert!(validate_name("a|b").is_err());
        assert!(validate_name("a\nb").is_err());
        assert!(validate_name("a\tb").is_err());
        assert!(validate_name(&"x".repeat(255)).is_ok());
        assert!(validate_name(&"x".repeat(256)).is_err());
        // Multi-byte UTF-8 counts in bytes.
        assert!(validate_name(&"é".repeat(128)).is_err());
        assert!(validate_name("é").is_ok());
        assert!(validate_name("__sys").is_ok());
        assert!(validate_user_name("__sys").is_err());
        assert!(validate_user_name("ev001").is_ok());
    }
}
