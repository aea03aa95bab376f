pub mod desk;
pub mod gradcheck;
