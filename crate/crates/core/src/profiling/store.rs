use std::collections::{BTreeMap, BTreeSet};
use std::sync::RwLock;

use crate::packet::Mac;

use super::{DeviceProfile, ProfileEntry, ProfileSet};

/// Shared profile database: one writer, many readers. Readers take
/// snapshots; writers merge batches at checkpoint boundaries.
#[derive(Debug, Default)]
pub struct ProfileStore {
    profiles: RwLock<ProfileSet>,
    monitored: RwLock<BTreeSet<Mac>>,
}

impl ProfileStore {
    pub fn new(monitored: impl IntoIterator<Item = Mac>) -> Self {
        ProfileStore {
            profiles: RwLock::new(ProfileSet::new()),
            monitored: RwLock::new(monitored.into_iter().collect()),
        }
    }

    pub fn with_profiles(profiles: ProfileSet, monitored: impl IntoIterator<Item = Mac>) -> Self {
        ProfileStore {
            profiles: RwLock::new(profiles),
            monitored: RwLock::new(monitored.into_iter().collect()),
        }
    }

    pub fn monitored_macs(&self) -> BTreeSet<Mac> {
        self.monitored
            .read()
            .expect("monitored list poisoned")
            .clone()
    }

    pub fn set_monitored(&self, macs: impl IntoIterator<Item = Mac>) {
        *self.monitored.write().expect("monitored list poisoned") = macs.into_iter().collect();
    }

    pub fn add_monitored(&self, mac: Mac) {
        self.monitored
            .write()
            .expect("monitored list poisoned")
            .insert(mac);
    }

    pub fn snapshot(&self) -> ProfileSet {
        self.profiles
            .read()
            .expect("profile store poisoned")
            .clone()
    }

    pub fn profile(&self, mac: &Mac) -> Option<DeviceProfile> {
        self.profiles
            .read()
            .expect("profile store poisoned")
            .get(mac)
            .cloned()
    }

    /// Merges a batch; returns how many entries were new.
    pub fn merge_entries(&self, entries: &[ProfileEntry], names: &BTreeMap<Mac, String>) -> usize {
        if entries.is_empty() {
            return 0;
        }
        let mut profiles = self.profiles.write().expect("profile store poisoned");
        let mut added = 0;
        for entry in entries {
            let profile = profiles.entry(entry.device_mac).or_insert_with(|| {
                let name = names
                    .get(&entry.device_mac)
                    .cloned()
                    .unwrap_or_else(|| entry.device_name.clone());
                DeviceProfile::new(entry.device_mac, name)
            });
            if profile.insert(entry) {
                added += 1;
            }
        }
        added
    }

    pub fn replace(&self, profiles: ProfileSet) {
        *self.profiles.write().expect("profile store poisoned") = profiles;
    }
}
