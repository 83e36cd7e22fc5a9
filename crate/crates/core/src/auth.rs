//! Permissions and the built-in role table.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    ConfigRead,
    ConfigWrite,
    RecordWrite,
    RecordRead,
    FileWrite,
    FileRead,
    AuditRead,
    Admin,
}

impl Permission {
    pub const ALL: [Permission; 8] = [
        Permission::ConfigRead,
        Permission::ConfigWrite,
        Permission::RecordWrite,
        Permission::RecordRead,
        Permission::FileWrite,
        Permission::FileRead,
        Permission::AuditRead,
        Permission::Admin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Permission::ConfigRead => "config_read",
            Permission::ConfigWrite => "config_write",
            Permission::RecordWrite => "record_write",
            Permission::RecordRead => "record_read",
            Permission::FileWrite => "file_write",
            Permission::FileRead => "file_read",
            Permission::AuditRead => "audit_read",
            Permission::Admin => "admin",
        }
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named permission set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub name: String,
    pub permissions: BTreeSet<Permission>,
}

impl Role {
    /// `admin` implies every other permission.
    pub fn grants(&self, permission: Permission) -> bool {
        self.permissions.contains(&Permission::Admin) || self.permissions.contains(&permission)
    }

    /// Looks up a built-in role by name.
    ///
    /// Every permission name is also a single-permission role; `collector`,
    /// `researcher`, `config_manager` and `auditor` are the composites used
    /// by typical deployments.
    pub fn builtin(name: &str) -> Option<Role> {
        use Permission::*;
        let permissions: Vec<Permission> = match name {
            "collector" => vec![ConfigRead, RecordWrite, FileWrite],
            "researcher" => vec![ConfigRead, RecordRead, FileRead],
            "config_manager" => vec![ConfigRead, ConfigWrite],
            "auditor" => vec![AuditRead],
            other => vec![Permission::ALL.into_iter().find(|p| p.as_str() == other)?],
        };
        Some(Role {
            name: name.to_string(),
            permissions: permissions.into_iter().collect(),
        })
    }

    pub fn builtin_names() -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Permission::ALL.iter().map(|p| p.as_str()).collect();
        names.extend(["collector", "researcher", "config_manager", "auditor"]);
        names
    }
}

/// True iff any of the named roles grants `permission`. Unknown names grant nothing.
pub fn roles_grant<'a>(roles: impl IntoIterator<Item = &'a String>, permission: Permission) -> bool {
    roles
        .into_iter()
        .filter_map(|name| Role::builtin(name))
        .any(|role| role.grants(permission))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn record_writer_cannot_write_config() {
        assert!(!roles_grant(&names(&["record_write"]), Permission::ConfigWrite));
        assert!(roles_grant(&names(&["record_write"]), Permission::RecordWrite));
    }

    #[test]
    fn admin_implies_everything() {
        for p in Permission::ALL {
            assert!(roles_grant(&names(&["admin"]), p));
        }
    }

    #[test]
    fn empty_role_set_denies_all() {
        for p in Permission::ALL {
            assert!(!roles_grant(&names(&[]), p));
        }
    }

    #[test]
    fn unknown_roles_are_rejected() {
        assert!(Role::builtin("superuser").is_none());
        for name in Role::builtin_names() {
            assert!(Role::builtin(name).is_some(), "{name}");
        }
    }
}
