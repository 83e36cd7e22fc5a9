//! Principals, bearer tokens, authentication.

use labpipe_core::api::{AuditOutcome, IssueTokenResponse, PrincipalView};
use labpipe_core::auth::roles_grant;
use labpipe_core::model::is_identifier;
use labpipe_core::{Permission, Role, Timestamp};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::{ApiError, ApiResult, Server, ANONYMOUS_PRINCIPAL};

const COLLECTION: &str = "principals";
const TOKEN_PREFIX: &str = "lp_";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub principal_id: String,
    #[serde(default)]
    pub display_name: String,
    #[serde(default)]
    pub roles: Vec<String>,
    /// SHA-256 of the bearer secret; `None` when no token is active.
    #[serde(default)]
    pub token_hash: Option<String>,
    pub created_at: Timestamp,
}

impl Principal {
    pub fn can(&self, permission: Permission) -> bool {
        roles_grant(&self.roles, permission)
    }

    pub fn view(&self) -> PrincipalView {
        PrincipalView {
            principal_id: self.principal_id.clone(),
            display_name: self.display_name.clone(),
            roles: self.roles.clone(),
            has_token: self.token_hash.is_some(),
        }
    }
}

fn token_digest(secret: &str) -> [u8; 32] {
    Sha256::digest(secret.as_bytes()).into()
}

/// 256 random bits, hex encoded.
fn mint_secret() -> String {
    let mut bytes = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut bytes);
    format!("{TOKEN_PREFIX}{}", hex::encode(bytes))
}

impl Server {
    fn load_principal(&self, principal_id: &str) -> ApiResult<Option<Principal>> {
        Ok(self
            .store
            .get(COLLECTION, principal_id)?
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| ApiError::internal(format!("corrupt principal: {e}")))?)
    }

    fn save_principal(&self, p: &Principal) -> ApiResult<()> {
        self.store.put(COLLECTION, &p.principal_id, &serde_json::to_value(p).expect("principals serialize"))?;
        Ok(())
    }

    /// Creates an `admin` principal holding a fresh token if no principal
    /// exists yet. Returns the secret, or `None` when already bootstrapped.
    pub fn bootstrap_admin(&self, principal_id: &str) -> ApiResult<Option<String>> {
        if !self.store.list(COLLECTION)?.is_empty() {
            return Ok(None);
        }
        let secret = mint_secret();
        let admin = Principal {
            principal_id: principal_id.to_string(),
            display_name: "Administrator".into(),
            roles: vec!["admin".into()],
            token_hash: Some(hex::encode(token_digest(&secret))),
            created_at: self.clock.now(),
        };
        if !self.store.create(COLLECTION, principal_id, &serde_json::to_value(&admin).expect("principals serialize"))? {
            return Ok(None);
        }
        self.audit(crate::SYSTEM_PRINCIPAL, "principal.bootstrap", &format!("principal/{principal_id}"), AuditOutcome::Allowed)?;
        Ok(Some(secret))
    }

    /// Resolves an `Authorization` header value to a principal.
    pub fn authenticate(&self, authorization: Option<&str>) -> ApiResult<Principal> {
        let result = self.authenticate_inner(authorization);
        if let Err(e) = &result {
            self.audit(ANONYMOUS_PRINCIPAL, "authenticate", "api", AuditOutcome::Denied)?;
            tracing::debug!(error = %e, "authentication failed");
        }
        result
    }

    fn authenticate_inner(&self, authorization: Option<&str>) -> ApiResult<Principal> {
        let header = authorization.ok_or_else(|| ApiError::unauthenticated("missing bearer token"))?;
        let secret = header
            .strip_prefix("Bearer ")
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ApiError::unauthenticated("malformed Authorization header"))?;
        let presented = token_digest(secret);
        let mut found = None;
        for (_, doc) in self.store.list(COLLECTION)? {
            let Ok(p) = serde_json::from_value::<Principal>(doc) else { continue };
            let Some(stored) = p.token_hash.as_deref().and_then(|h| hex::decode(h).ok()) else {
                continue;
            };
            if stored.len() == presented.len() && bool::from(stored.ct_eq(&presented)) {
                found = Some(p);
            }
        }
        found.ok_or_else(|| ApiError::unauthenticated("unknown or revoked token"))
    }

    pub fn create_principal(&self, caller: &Principal, principal_id: &str, display_name: &str) -> ApiResult<PrincipalView> {
        let resource = format!("principal/{principal_id}");
        self.require(caller, Permission::Admin, "principal.create", &resource)?;
        self.audited(caller, "principal.create", &resource, || {
            if !is_identifier(principal_id) {
                return Err(ApiError::bad_request(format!("'{principal_id}' is not a valid principal id")));
            }
            let p = Principal {
                principal_id: principal_id.to_string(),
                display_name: display_name.to_string(),
                roles: Vec::new(),
                token_hash: None,
                created_at: self.clock.now(),
            };
            if !self.store.create(COLLECTION, principal_id, &serde_json::to_value(&p).expect("principals serialize"))? {
                return Err(ApiError::new(409, labpipe_core::api::codes::VERSION_CONFLICT, format!("principal '{principal_id}' already exists")));
            }
            Ok(p.view())
        })
    }

    pub fn list_principals(&self, caller: &Principal) -> ApiResult<Vec<PrincipalView>> {
        self.require(caller, Permission::Admin, "principal.list", "principals")?;
        self.audited(caller, "principal.list", "principals", || {
            Ok(self
                .store
                .list(COLLECTION)?
                .into_iter()
                .filter_map(|(_, v)| serde_json::from_value::<Principal>(v).ok())
                .map(|p| p.view())
                .collect())
        })
    }

    /// Grants `roles` to the principal and replaces its token. The secret is
    /// returned once; only its digest is stored.
    pub fn issue_token(&self, caller: &Principal, principal_id: &str, roles: &[String]) -> ApiResult<IssueTokenResponse> {
        let resource = format!("principal/{principal_id}");
        self.require(caller, Permission::Admin, "token.issue", &resource)?;
        self.audited(caller, "token.issue", &resource, || {
            if roles.is_empty() {
                return Err(ApiError::bad_request("at least one role is required"));
            }
            if let Some(unknown) = roles.iter().find(|r| Role::builtin(r).is_none()) {
                return Err(ApiError::bad_request(format!(
                    "unknown role '{unknown}'; known roles: {}",
                    Role::builtin_names().join(", ")
                )));
            }
            let mut target = self
                .load_principal(principal_id)?
                .ok_or_else(|| ApiError::not_found(format!("no principal '{principal_id}'")))?;
            let secret = mint_secret();
            target.roles = roles.to_vec();
            target.token_hash = Some(hex::encode(token_digest(&secret)));
            self.save_principal(&target)?;
            Ok(IssueTokenResponse {
                principal_id: principal_id.to_string(),
                roles: target.roles,
                secret,
            })
        })
    }

    pub fn revoke_token(&self, caller: &Principal, principal_id: &str) -> ApiResult<PrincipalView> {
        let resource = format!("principal/{principal_id}");
        self.require(caller, Permission::Admin, "token.revoke", &resource)?;
        self.audited(caller, "token.revoke", &resource, || {
            let mut target = self
                .load_principal(principal_id)?
                .ok_or_else(|| ApiError::not_found(format!("no principal '{principal_id}'")))?;
            target.token_hash = None;
            self.save_principal(&target)?;
            Ok(target.view())
        })
    }
}
