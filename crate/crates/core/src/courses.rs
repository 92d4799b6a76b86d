//! Accounts, subscription payments, courses and the grant-based privacy
//! model.

use crate::db::Db;
use crate::error::{Error, Result};
use crate::text::slug;
use argon2::password_hash::rand_core::OsRng;
use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use chrono::{DateTime, Duration, Utc};
use rand::RngCore;
use rusqlite::{params, OptionalExtension, Row};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::str::FromStr;
use std::sync::OnceLock;

pub const MIN_PASSWORD_CHARS: usize = 8;
pub const TOKEN_TTL_HOURS: i64 = 24;
pub const RESET_TTL_MINUTES: i64 = 60;
const STATUS_POLLS: usize = 10;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl std::str::FromStr for $name {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err($crate::error::Error::InvalidArgument(format!(
                        concat!("invalid ", stringify!($name), ": {}"), other
                    ))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}
pub(crate) use string_enum;

string_enum!(Role { Instructor => "instructor", Learner => "learner" });
string_enum!(Plan { LearnerBasic => "learner_basic", InstructorBasic => "instructor_basic" });
string_enum!(PaymentStatus { Pending => "pending", Confirmed => "confirmed", Failed => "failed" });
string_enum!(Visibility { Public => "public", Private => "private" });

impl Plan {
    /// Price in minor currency units.
    pub fn amount(self) -> i64 {
        match self {
            Plan::LearnerBasic => 49_900,
            Plan::InstructorBasic => 99_900,
        }
    }

    pub fn role(self) -> Role {
        match self {
            Plan::LearnerBasic => Role::Learner,
            Plan::InstructorBasic => Role::Instructor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user_id: i64,
    pub username: String,
    pub email: String,
    #[serde(skip_serializing)]
    pub password_hash: String,
    pub role: Role,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentRecord {
    pub payment_id: i64,
    pub user_id: i64,
    pub plan: Plan,
    pub amount: i64,
    pub merchant_txn_id: String,
    pub status: PaymentStatus,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Course {
    pub course_id: i64,
    pub title: String,
    pub slug: String,
    pub visibility: Visibility,
    pub owner_id: i64,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessGrant {
    pub course_id: i64,
    pub user_id: i64,
    pub granted_by: i64,
    pub granted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionToken {
    pub token: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentInit {
    /// Our payment id, passed as the merchant order reference.
    pub payment_id: i64,
    pub user_id: i64,
    pub plan: Plan,
    pub amount: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySession {
    pub merchant_txn_id: String,
    pub redirect_ref: String,
}

pub trait PaymentGateway: Send + Sync {
    fn initiate(&self, request: &PaymentInit) -> Result<GatewaySession>;
    fn status(&self, merchant_txn_id: &str) -> Result<PaymentStatus>;
}

/// Deterministic gateway for development and tests: every payment gets
/// `merchant_txn_id = "TEST-<payment_id>"` and reports `outcome`.
#[derive(Debug, Clone)]
pub struct StubGateway {
    outcome: PaymentStatus,
}

impl StubGateway {
    pub fn new() -> Self {
        Self::with_outcome(PaymentStatus::Confirmed)
    }

    pub fn with_outcome(outcome: PaymentStatus) -> Self {
        Self { outcome }
    }
}

impl Default for StubGateway {
    fn default() -> Self {
        Self::new()
    }
}

impl PaymentGateway for StubGateway {
    fn initiate(&self, request: &PaymentInit) -> Result<GatewaySession> {
        Ok(GatewaySession {
            merchant_txn_id: format!("TEST-{}", request.payment_id),
            redirect_ref: format!("stub://pay/{}", request.payment_id),
        })
    }

    fn status(&self, merchant_txn_id: &str) -> Result<PaymentStatus> {
        if merchant_txn_id.starts_with("TEST-") {
            Ok(self.outcome)
        } else {
            Err(Error::PaymentFailed)
        }
    }
}

pub fn hash_password(password: &str) -> Result<String> {
    let salt = SaltString::generate(&mut OsRng);
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| Error::Internal(format!("password hashing failed: {e}")))
}

pub fn verify_password(password: &str, hash: &str) -> bool {
    PasswordHash::new(hash)
        .map(|parsed| {
            Argon2::default()
                .verify_password(password.as_bytes(), &parsed)
                .is_ok()
        })
        .unwrap_or(false)
}

// Verified against when the username does not exist, so both failure paths
// cost one hash verification.
fn dummy_hash() -> &'static str {
    static HASH: OnceLock<String> = OnceLock::new();
    HASH.get_or_init(|| hash_password("dummy-password-for-timing").expect("hashing works"))
}

/// 256 random bits, hex encoded.
fn random_token() -> String {
    let mut raw = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut raw);
    hex::encode(raw)
}

fn token_hash(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

fn user_from_row(row: &Row<'_>) -> rusqlite::Result<UserAccount> {
    Ok(UserAccount {
        user_id: row.get(0)?,
        username: row.get(1)?,
        email: row.get(2)?,
        password_hash: row.get(3)?,
        role: parse_col(row, 4)?,
        created_at: row.get(5)?,
    })
}

fn payment_from_row(row: &Row<'_>) -> rusqlite::Result<PaymentRecord> {
    Ok(PaymentRecord {
        payment_id: row.get(0)?,
        user_id: row.get(1)?,
        plan: parse_col(row, 2)?,
        amount: row.get(3)?,
        merchant_txn_id: row.get(4)?,
        status: parse_col(row, 5)?,
        created_at: row.get(6)?,
    })
}

fn course_from_row(row: &Row<'_>) -> rusqlite::Result<Course> {
    Ok(Course {
        course_id: row.get(0)?,
        title: row.get(1)?,
        slug: row.get(2)?,
        visibility: parse_col(row, 3)?,
        owner_id: row.get(4)?,
        created_at: row.get(5)?,
    })
}

/// Read a TEXT column through `FromStr`.
pub(crate) fn parse_col<T: FromStr<Err = Error>>(row: &Row<'_>, idx: usize) -> rusqlite::Result<T> {
    let raw: String = row.get(idx)?;
    raw.parse().map_err(|e: Error| {
        rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e))
    })
}

const USER_COLS: &str = "user_id, username, email, password_hash, role, created_at";
const PAYMENT_COLS: &str = "payment_id, user_id, plan, amount, merchant_txn_id, status, created_at";
const COURSE_COLS: &str = "course_id, title, slug, visibility, owner_id, created_at";

fn is_unique_violation(err: &rusqlite::Error) -> bool {
    matches!(
        err,
        rusqlite::Error::SqliteFailure(e, _) if e.extended_code == rusqlite::ffi::SQLITE_CONSTRAINT_UNIQUE
    )
}

impl Db {
    /// Create an account awaiting payment. `plan` must be the plan for `role`.
    pub fn register(&self, username: &str, email: &str, password: &str, role: Role, plan: Plan) -> Result<i64> {
        let username = username.trim();
        if username.is_empty() {
            return Err(Error::InvalidArgument("username must not be empty".into()));
        }
        if !email.contains('@') {
            return Err(Error::InvalidArgument("email address is not valid".into()));
        }
        if password.chars().count() < MIN_PASSWORD_CHARS {
            return Err(Error::WeakPassword);
        }
        if plan.role() != role {
            return Err(Error::InvalidArgument(format!("plan {plan} is not available for role {role}")));
        }
        let hash = hash_password(password)?;
        let conn = self.conn();
        let inserted = conn.execute(
            "INSERT INTO users (username, email, password_hash, role, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![username, email.trim(), hash, role.as_str(), Utc::now()],
        );
        match inserted {
            Ok(_) => Ok(conn.last_insert_rowid()),
            Err(e) if is_unique_violation(&e) => Err(Error::UsernameTaken),
            Err(e) => Err(e.into()),
        }
    }

    pub fn user(&self, user_id: i64) -> Result<UserAccount> {
        self.conn()
            .query_row(&format!("SELECT {USER_COLS} FROM users WHERE user_id = ?1"), [user_id], user_from_row)
            .optional()?
            .ok_or(Error::UserNotFound)
    }

    fn user_by_name(&self, username: &str) -> Result<Option<UserAccount>> {
        Ok(self
            .conn()
            .query_row(&format!("SELECT {USER_COLS} FROM users WHERE username = ?1"), [username.trim()], user_from_row)
            .optional()?)
    }

    pub fn has_confirmed_payment(&self, user_id: i64) -> Result<bool> {
        let count: i64 = self.conn().query_row(
            "SELECT COUNT(*) FROM payments WHERE user_id = ?1 AND status = 'confirmed'",
            [user_id],
            |r| r.get(0),
        )?;
        Ok(count > 0)
    }

    pub fn payments(&self, user_id: i64) -> Result<Vec<PaymentRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT {PAYMENT_COLS} FROM payments WHERE user_id = ?1 ORDER BY payment_id"
        ))?;
        let rows = stmt.query_map([user_id], payment_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    fn set_payment(&self, payment_id: i64, txn: &str, status: PaymentStatus) -> Result<PaymentRecord> {
        let conn = self.conn();
        conn.execute(
            "UPDATE payments SET merchant_txn_id = ?2, status = ?3 WHERE payment_id = ?1",
            params![payment_id, txn, status.as_str()],
        )?;
        Ok(conn.query_row(
            &format!("SELECT {PAYMENT_COLS} FROM payments WHERE payment_id = ?1"),
            [payment_id],
            payment_from_row,
        )?)
    }

    /// Run a subscription payment through `gateway`. A user who already holds
    /// a confirmed payment for `plan` gets that record back.
    pub fn process_payment(&self, gateway: &dyn PaymentGateway, user_id: i64, plan: Plan) -> Result<PaymentRecord> {
        let user = self.user(user_id)?;
        if plan.role() != user.role {
            return Err(Error::InvalidArgument(format!("plan {plan} is not available for role {}", user.role)));
        }
        if let Some(done) = self
            .payments(user_id)?
            .into_iter()
            .find(|p| p.plan == plan && p.status == PaymentStatus::Confirmed)
        {
            return Ok(done);
        }
        let payment_id = {
            let conn = self.conn();
            conn.execute(
                "INSERT INTO payments (user_id, plan, amount, status, created_at) VALUES (?1, ?2, ?3, 'pending', ?4)",
                params![user_id, plan.as_str(), plan.amount(), Utc::now()],
            )?;
            conn.last_insert_rowid()
        };
        let session = gateway.initiate(&PaymentInit {
            payment_id,
            user_id,
            plan,
            amount: plan.amount(),
        })?;
        let mut status = PaymentStatus::Pending;
        for _ in 0..STATUS_POLLS {
            status = gateway.status(&session.merchant_txn_id)?;
            if status != PaymentStatus::Pending {
                break;
            }
            std::thread::sleep(std::time::Duration::from_millis(50));
        }
        let record = self.set_payment(payment_id, &session.merchant_txn_id, status)?;
        match status {
            PaymentStatus::Failed => Err(Error::PaymentFailed),
            _ => Ok(record),
        }
    }

    /// The account for a username and password. Unknown users and wrong
    /// passwords fail identically and cost the same hash verification.
    pub fn verify_credentials(&self, username: &str, password: &str) -> Result<UserAccount> {
        let user = self.user_by_name(username)?;
        let hash = user.as_ref().map_or(dummy_hash(), |u| u.password_hash.as_str());
        let ok = verify_password(password, hash);
        match user {
            Some(u) if ok => Ok(u),
            _ => Err(Error::InvalidCredentials),
        }
    }

    /// Password check, then payment check.
    pub fn login(&self, username: &str, password: &str) -> Result<SessionToken> {
        let user = self.verify_credentials(username, password)?;
        if !self.has_confirmed_payment(user.user_id)? {
            return Err(Error::PaymentRequired);
        }
        let token = random_token();
        let expires_at = Utc::now() + Duration::hours(TOKEN_TTL_HOURS);
        self.conn().execute(
            "INSERT INTO auth_tokens (token_hash, user_id, expires_at) VALUES (?1, ?2, ?3)",
            params![token_hash(&token), user.user_id, expires_at],
        )?;
        Ok(SessionToken { token, expires_at })
    }

    /// Resolve a bearer token to its user.
    pub fn authenticate(&self, token: &str) -> Result<UserAccount> {
        let row: Option<(i64, DateTime<Utc>)> = self
            .conn()
            .query_row(
                "SELECT user_id, expires_at FROM auth_tokens WHERE token_hash = ?1",
                [token_hash(token)],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?;
        match row {
            Some((user_id, expires)) if expires > Utc::now() => self.user(user_id),
            _ => Err(Error::Unauthorized),
        }
    }

    pub fn logout(&self, token: &str) -> Result<()> {
        self.conn()
            .execute("DELETE FROM auth_tokens WHERE token_hash = ?1", [token_hash(token)])?;
        Ok(())
    }

    /// Issue a single-use password-reset token for `username`, if the
    /// account exists. Delivering it is the caller's business.
    pub fn request_password_reset(&self, username: &str) -> Result<Option<(UserAccount, String)>> {
        let Some(user) = self.user_by_name(username)? else {
            return Ok(None);
        };
        let token = random_token();
        self.conn().execute(
            "INSERT INTO password_resets (token_hash, user_id, expires_at) VALUES (?1, ?2, ?3)",
            params![token_hash(&token), user.user_id, Utc::now() + Duration::minutes(RESET_TTL_MINUTES)],
        )?;
        Ok(Some((user, token)))
    }

    /// Consume a reset token and set a new password. Existing sessions of
    /// the user are revoked.
    pub fn reset_password(&self, token: &str, new_password: &str) -> Result<()> {
        if new_password.chars().count() < MIN_PASSWORD_CHARS {
            return Err(Error::WeakPassword);
        }
        let hash = hash_password(new_password)?;
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        let row: Option<(i64, DateTime<Utc>)> = tx
            .query_row(
                "SELECT user_id, expires_at FROM password_resets WHERE token_hash = ?1",
                [token_hash(token)],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?;
        let user_id = match row {
            Some((user_id, expires)) if expires > Utc::now() => user_id,
            _ => return Err(Error::InvalidToken),
        };
        tx.execute("DELETE FROM password_resets WHERE token_hash = ?1", [token_hash(token)])?;
        tx.execute("UPDATE users SET password_hash = ?2 WHERE user_id = ?1", params![user_id, hash])?;
        tx.execute("DELETE FROM auth_tokens WHERE user_id = ?1", [user_id])?;
        tx.commit()?;
        Ok(())
    }

    pub fn create_course(&self, owner: &UserAccount, title: &str, visibility: Visibility) -> Result<Course> {
        if owner.role != Role::Instructor {
            return Err(Error::AccessDenied);
        }
        let title = title.trim();
        if title.is_empty() {
            return Err(Error::InvalidArgument("course title must not be empty".into()));
        }
        let conn = self.conn();
        let inserted = conn.execute(
            "INSERT INTO courses (title, slug, visibility, owner_id, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![title, slug(title), visibility.as_str(), owner.user_id, Utc::now()],
        );
        match inserted {
            Ok(_) => {}
            Err(e) if is_unique_violation(&e) => return Err(Error::DuplicateSlug),
            Err(e) => return Err(e.into()),
        }
        let id = conn.last_insert_rowid();
        Ok(conn.query_row(&format!("SELECT {COURSE_COLS} FROM courses WHERE course_id = ?1"), [id], course_from_row)?)
    }

    pub fn course(&self, course_id: i64) -> Result<Course> {
        self.conn()
            .query_row(&format!("SELECT {COURSE_COLS} FROM courses WHERE course_id = ?1"), [course_id], course_from_row)
            .optional()?
            .ok_or(Error::CourseNotFound)
    }

    pub fn course_by_slug(&self, course_slug: &str) -> Result<Course> {
        self.conn()
            .query_row(&format!("SELECT {COURSE_COLS} FROM courses WHERE slug = ?1"), [course_slug], course_from_row)
            .optional()?
            .ok_or(Error::CourseNotFound)
    }

    fn has_grant(&self, course_id: i64, user_id: i64) -> Result<bool> {
        let count: i64 = self.conn().query_row(
            "SELECT COUNT(*) FROM grants WHERE course_id = ?1 AND user_id = ?2",
            [course_id, user_id],
            |r| r.get(0),
        )?;
        Ok(count > 0)
    }

    /// Public courses, courses the user owns, and private courses the user
    /// holds a grant for.
    pub fn can_read(&self, user: &UserAccount, course: &Course) -> Result<bool> {
        Ok(course.visibility == Visibility::Public
            || course.owner_id == user.user_id
            || self.has_grant(course.course_id, user.user_id)?)
    }

    /// The course, if `user` may read it.
    pub fn readable_course(&self, user: &UserAccount, course_id: i64) -> Result<Course> {
        let course = self.course(course_id)?;
        if self.can_read(user, &course)? {
            Ok(course)
        } else {
            Err(Error::AccessDenied)
        }
    }

    /// The course, if `user` owns it.
    pub fn owned_course(&self, user: &UserAccount, course_id: i64) -> Result<Course> {
        let course = self.course(course_id)?;
        if course.owner_id == user.user_id {
            Ok(course)
        } else {
            Err(Error::AccessDenied)
        }
    }

    pub fn grant_access(&self, owner: &UserAccount, course_id: i64, user_id: i64) -> Result<AccessGrant> {
        let course = self.owned_course(owner, course_id)?;
        if course.visibility != Visibility::Private {
            return Err(Error::NotPrivateCourse);
        }
        self.user(user_id)?;
        let conn = self.conn();
        conn.execute(
            "INSERT OR IGNORE INTO grants (course_id, user_id, granted_by, granted_at) VALUES (?1, ?2, ?3, ?4)",
            params![course_id, user_id, owner.user_id, Utc::now()],
        )?;
        Ok(conn.query_row(
            "SELECT course_id, user_id, granted_by, granted_at FROM grants WHERE course_id = ?1 AND user_id = ?2",
            [course_id, user_id],
            |r| {
                Ok(AccessGrant {
                    course_id: r.get(0)?,
                    user_id: r.get(1)?,
                    granted_by: r.get(2)?,
                    granted_at: r.get(3)?,
                })
            },
        )?)
    }

    pub fn revoke_access(&self, owner: &UserAccount, course_id: i64, user_id: i64) -> Result<()> {
        let course = self.owned_course(owner, course_id)?;
        if course.visibility != Visibility::Private {
            return Err(Error::NotPrivateCourse);
        }
        self.conn()
            .execute("DELETE FROM grants WHERE course_id = ?1 AND user_id = ?2", [course_id, user_id])?;
        Ok(())
    }

    pub fn list_accessible(&self, user: &UserAccount) -> Result<Vec<Course>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT {COURSE_COLS} FROM courses c
             WHERE c.visibility = 'public'
                OR c.owner_id = ?1
                OR EXISTS (SELECT 1 FROM grants g WHERE g.course_id = c.course_id AND g.user_id = ?1)
             ORDER BY c.course_id"
        ))?;
        let rows = stmt.query_map([user.user_id], course_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }
}
